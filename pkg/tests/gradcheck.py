"""Central-difference gradient checks for every registered autodiff op.

Each case builder draws random shapes and values, and returns the float64
input arrays plus a function mapping input tensors to an output. The output
is reduced to a scalar by a fixed random projection so every output element
contributes to the gradient.
"""

from __future__ import annotations

import numpy as np

from triage.autodiff import Tensor, ops

H = 1e-5


def _away_from_zero(rng, shape, lo=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < lo, np.sign(x + 1e-12) * lo + x, x)


def _dims(rng, k, lo=1, hi=4):
    return tuple(int(d) for d in rng.integers(lo, hi + 1, size=k))


def case_add(rng):
    n, m = _dims(rng, 2)
    b_shape = [(n, m), (m,), (1, m), (n, 1)][rng.integers(4)]
    return [rng.normal(size=(n, m)), rng.normal(size=b_shape)], lambda a, b: ops.add(a, b)


def case_sub(rng):
    n, m = _dims(rng, 2)
    b_shape = [(n, m), (m,), (n, 1)][rng.integers(3)]
    return [rng.normal(size=(n, m)), rng.normal(size=b_shape)], lambda a, b: ops.sub(a, b)


def case_mul(rng):
    n, m = _dims(rng, 2)
    b_shape = [(n, m), (m,), (1, 1)][rng.integers(3)]
    return [rng.normal(size=(n, m)), rng.normal(size=b_shape)], lambda a, b: ops.mul(a, b)


def case_div(rng):
    n, m = _dims(rng, 2)
    b = rng.uniform(0.5, 2.0, size=(n, m)) * rng.choice([-1, 1], size=(n, m))
    return [rng.normal(size=(n, m)), b], lambda a, b: ops.div(a, b)


def case_neg(rng):
    return [rng.normal(size=_dims(rng, 2))], lambda a: ops.neg(a)


def case_exp(rng):
    return [rng.normal(size=_dims(rng, 2))], lambda a: ops.exp(a)


def case_log(rng):
    return [rng.uniform(0.3, 3.0, size=_dims(rng, 2))], lambda a: ops.log(a)


def case_matmul(rng):
    n, k, m = _dims(rng, 3)
    if rng.random() < 0.5:
        return [rng.normal(size=(n, k)), rng.normal(size=(k, m))], lambda a, b: ops.matmul(a, b)
    bsz = int(rng.integers(1, 4))
    return [rng.normal(size=(bsz, n, k)), rng.normal(size=(k, m))], lambda a, b: ops.matmul(a, b)


def case_sum(rng):
    shape = _dims(rng, 3)
    axis = [None, 0, 1, 2, -1][rng.integers(5)]
    keep = bool(rng.integers(2))
    return [rng.normal(size=shape)], lambda a: ops.sum(a, axis=axis, keepdims=keep)


def case_mean(rng):
    shape = _dims(rng, 3)
    axis = [None, 0, 1, 2][rng.integers(4)]
    keep = bool(rng.integers(2))
    return [rng.normal(size=shape)], lambda a: ops.mean(a, axis=axis, keepdims=keep)


def case_reshape(rng):
    n, m, k = _dims(rng, 3)
    return [rng.normal(size=(n, m, k))], lambda a: ops.reshape(a, (n * m, k))


def case_transpose(rng):
    shape = _dims(rng, 3)
    axes = tuple(int(i) for i in rng.permutation(3))
    return [rng.normal(size=shape)], lambda a: ops.transpose(a, axes)


def case_getitem(rng):
    n, m = _dims(rng, 2, 2, 5)
    if rng.random() < 0.5:
        idx = (slice(0, n - 1), slice(None))
    else:
        idx = (rng.integers(0, n, size=6),)
    return [rng.normal(size=(n, m))], lambda a: ops.getitem(a, idx)


def case_concat(rng):
    n = int(rng.integers(1, 4))
    axis = int(rng.integers(2))
    shapes = []
    for _ in range(int(rng.integers(1, 4))):
        s = [n, n]
        s[axis] = int(rng.integers(1, 4))
        shapes.append(tuple(s))
    return [rng.normal(size=s) for s in shapes], lambda *xs: ops.concat(xs, axis=axis)


def case_stack(rng):
    shape = _dims(rng, 2)
    k = int(rng.integers(1, 4))
    axis = int(rng.integers(3))
    return [rng.normal(size=shape) for _ in range(k)], lambda *xs: ops.stack(xs, axis=axis)


def case_sigmoid(rng):
    return [rng.normal(size=_dims(rng, 2)) * 3], lambda a: ops.sigmoid(a)


def case_tanh(rng):
    return [rng.normal(size=_dims(rng, 2))], lambda a: ops.tanh(a)


def case_relu(rng):
    return [_away_from_zero(rng, _dims(rng, 2))], lambda a: ops.relu(a)


def case_softmax(rng):
    axis = int(rng.integers(2))
    return [rng.normal(size=_dims(rng, 2, 2, 5))], lambda a: ops.softmax(a, axis=axis)


def case_log_softmax(rng):
    axis = int(rng.integers(2))
    return [rng.normal(size=_dims(rng, 2, 2, 5))], lambda a: ops.log_softmax(a, axis=axis)


def case_embedding_lookup(rng):
    V, D = _dims(rng, 2, 2, 5)
    idx = rng.integers(0, V, size=_dims(rng, 2))
    return [rng.normal(size=(V, D))], lambda t: ops.embedding_lookup(t, idx)


def case_conv1d(rng):
    B, L, Cin, Cout = _dims(rng, 4)
    w = int(rng.integers(1, 6))
    if rng.random() < 0.5:
        return ([rng.normal(size=(B, L, Cin)), rng.normal(size=(w, Cin, Cout)), rng.normal(size=Cout)],
                lambda x, W, b: ops.conv1d(x, W, b))
    return [rng.normal(size=(B, L, Cin)), rng.normal(size=(w, Cin, Cout))], lambda x, W: ops.conv1d(x, W)


def case_max_pool_over_time(rng):
    B, L, C = _dims(rng, 3)
    mask = rng.random((B, L)) < 0.7
    if rng.random() < 0.5:
        mask = None
    return [rng.normal(size=(B, L, C))], lambda x: ops.max_pool_over_time(x, mask)


def case_dropout(rng):
    p = float(rng.uniform(0.1, 0.6))
    seed = int(rng.integers(1 << 30))
    return ([rng.normal(size=_dims(rng, 2))],
            lambda x: ops.dropout(x, p, train=True, rng=np.random.default_rng(seed)))


def case_batch_norm_1d(rng):
    N, F = int(rng.integers(2, 6)), int(rng.integers(1, 4))
    train = bool(rng.integers(2))
    rm, rv = rng.normal(size=F), rng.uniform(0.5, 2.0, size=F)

    def fn(x, g, b):
        return ops.batch_norm_1d(x, g, b, rm.copy(), rv.copy(), train=train)

    return [rng.normal(size=(N, F)) * 2 + 1, rng.normal(size=F), rng.normal(size=F)], fn


def case_cross_entropy(rng):
    N, C = int(rng.integers(1, 5)), int(rng.integers(2, 6))
    target = rng.integers(0, C, size=N)
    allowed = None
    if rng.random() < 0.5:
        allowed = rng.random((N, C)) < 0.6
        allowed[np.arange(N), target] = True
    weight = rng.uniform(0.0, 2.0, size=N) if rng.random() < 0.5 else None
    reduction = ["mean", "sum"][rng.integers(2)]
    return ([rng.normal(size=(N, C))],
            lambda z: ops.cross_entropy(z, target, weight=weight, reduction=reduction, allowed=allowed))


def case_binary_cross_entropy(rng):
    shape = _dims(rng, 2)
    t = (rng.random(shape) < 0.5).astype(float)
    return [rng.normal(size=shape) * 2], lambda z: ops.binary_cross_entropy(z, t)


def case_mean_squared_error(rng):
    shape = _dims(rng, 2)
    t = rng.normal(size=shape)
    return [rng.normal(size=shape)], lambda p: ops.mean_squared_error(p, t)


def case_weighted_sum(rng):
    k = int(rng.integers(1, 4))
    w = rng.uniform(0.0, 3.0, size=k)
    shapes = [_dims(rng, 2) for _ in range(k)]

    def fn(*xs):
        losses = [ops.sum(ops.mul(x, x)) for x in xs]
        return ops.weighted_sum(losses, w)

    return [rng.normal(size=s) for s in shapes], fn


def case_simple_rnn_step(rng):
    B, I, Hd = _dims(rng, 3)
    return ([rng.normal(size=(B, I)), rng.normal(size=(B, Hd)), rng.normal(size=(I, Hd)),
             rng.normal(size=(Hd, Hd)), rng.normal(size=Hd)],
            lambda x, h, wx, wh, b: ops.simple_rnn_step(x, h, wx, wh, b))


def case_lstm_step(rng):
    B, I, Hd = _dims(rng, 3)

    def fn(x, h, c, wx, wh, b):
        h2, c2 = ops.lstm_step(x, h, c, wx, wh, b)
        return ops.concat([h2, c2], axis=1)

    return ([rng.normal(size=(B, I)), rng.normal(size=(B, Hd)), rng.normal(size=(B, Hd)),
             rng.normal(size=(I, 4 * Hd)) * 0.5, rng.normal(size=(Hd, 4 * Hd)) * 0.5,
             rng.normal(size=4 * Hd)], fn)


def case_gru_step(rng):
    B, I, Hd = _dims(rng, 3)
    return ([rng.normal(size=(B, I)), rng.normal(size=(B, Hd)), rng.normal(size=(I, 3 * Hd)),
             rng.normal(size=(Hd, 3 * Hd)), rng.normal(size=3 * Hd), rng.normal(size=3 * Hd)],
            lambda x, h, wx, wh, bx, bh: ops.gru_step(x, h, wx, wh, bx, bh))


CASES = {name[5:]: fn for name, fn in globals().items() if name.startswith("case_")}


def _scalar(fn, arrays, proj_seed):
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*tensors)
    proj = np.random.default_rng(proj_seed).normal(size=out.shape)
    loss = ops.sum(ops.mul(out, proj))
    return loss, tensors


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max abs difference scaled by the larger max-magnitude of the two.

    Gradients that are both below 1e-7 everywhere count as agreeing.
    """
    scale = max(np.max(np.abs(numeric), initial=0.0), np.max(np.abs(analytic), initial=0.0))
    diff = np.max(np.abs(analytic - numeric), initial=0.0)
    if scale < 1e-7:
        return 0.0 if diff < 1e-7 else float("inf")
    return float(diff / scale)


def check_case(name: str, rng: np.random.Generator) -> float:
    """Worst relative error over all inputs for one random draw of ``name``."""
    arrays, fn = CASES[name](rng)
    proj_seed = int(rng.integers(1 << 30))
    loss, tensors = _scalar(fn, arrays, proj_seed)
    loss.backward()
    worst = 0.0
    for k, arr in enumerate(arrays):
        analytic = tensors[k].grad if tensors[k].grad is not None else np.zeros_like(arr)
        numeric = np.zeros_like(arr)
        for i in np.ndindex(arr.shape):
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[k][i] += H
            minus[k][i] -= H
            fp = _scalar(fn, plus, proj_seed)[0].item()
            fm = _scalar(fn, minus, proj_seed)[0].item()
            numeric[i] = (fp - fm) / (2 * H)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def run_suite(draws: int = 20, seed: int = 0) -> dict:
    """Worst error per registered op across ``draws`` random instances."""
    out = {}
    for j, name in enumerate(sorted(CASES)):
        rng = np.random.default_rng([seed, j])
        out[name] = max(check_case(name, rng) for _ in range(draws))
    return out
