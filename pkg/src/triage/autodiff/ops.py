"""Differentiable operators.

Shape conventions: sequences are ``(batch, time, channels)``; matrices are
``(rows, features)``. Each op returns a new tensor whose backward closure maps
the output gradient to one gradient (or ``None``) per input.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, make_node

REGISTERED_OPS = (
    "add", "sub", "mul", "div", "neg", "matmul", "exp", "log", "sum", "mean",
    "reshape", "transpose", "getitem", "concat", "stack", "sigmoid", "tanh",
    "relu", "softmax", "log_softmax", "embedding_lookup", "conv1d",
    "max_pool_over_time", "dropout", "batch_norm_1d", "cross_entropy",
    "binary_cross_entropy", "mean_squared_error", "weighted_sum",
    "simple_rnn_step", "lstm_step", "gru_step",
)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_check(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- elementwise arithmetic ------------------------------------------------

def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _broadcast_check("add", a, b)
    return make_node(a.data + b.data, (a, b), "add",
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _broadcast_check("sub", a, b)
    return make_node(a.data - b.data, (a, b), "sub",
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _broadcast_check("mul", a, b)
    return make_node(a.data * b.data, (a, b), "mul",
                     lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _broadcast_check("div", a, b)
    out = a.data / b.data
    return make_node(out, (a, b), "div",
                     lambda g: (_unbroadcast(g / b.data, a.shape),
                                _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = _lift(a)
    return make_node(-a.data, (a,), "neg", lambda g: (-g,))


def exp(a) -> Tensor:
    a = _lift(a)
    out = np.exp(a.data)
    return make_node(out, (a,), "exp", lambda g: (g * out,))


def log(a) -> Tensor:
    a = _lift(a)
    return make_node(np.log(a.data), (a,), "log", lambda g: (g / a.data,))


# -- linear algebra and shape ---------------------------------------------

def matmul(a, b) -> Tensor:
    """``(..., n, k) @ (k, m)`` or equal-rank batched products."""
    a = _lift(a)
    b = _lift(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2 and a.ndim > 2:
            k, m = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, m)
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_node(out, (a, b), "matmul", backward)


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    a = _lift(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_node(out, (a,), "sum", backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _lift(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / max(out.size, 1)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return make_node(out, (a,), "mean", backward)


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    return make_node(out, (a,), "reshape", lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = _lift(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return make_node(out, (a,), "transpose", lambda g: (np.transpose(g, inv),))


def getitem(a, idx) -> Tensor:
    a = _lift(a)
    out = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return make_node(np.array(out, copy=True), (a,), "getitem", backward)


def concat(tensors, axis=-1) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of an empty list")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in tensors], detail=f"axis={axis}") from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return make_node(out, tensors, "concat", backward)


def stack(tensors, axis=0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("stack", *[t.shape for t in tensors]) from None

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return make_node(out, tensors, "stack", backward)


# -- nonlinearities --------------------------------------------------------

def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ez = np.exp(x[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(a) -> Tensor:
    a = _lift(a)
    out = _sigmoid(a.data)
    return make_node(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = _lift(a)
    out = np.tanh(a.data)
    return make_node(out, (a,), "tanh", lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = _lift(a)
    pos = a.data > 0
    return make_node(a.data * pos, (a,), "relu", lambda g: (g * pos,))


def _log_softmax(x, axis=-1):
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    z = x - m
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def softmax(a, axis=-1) -> Tensor:
    a = _lift(a)
    out = np.exp(_log_softmax(a.data, axis))

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return make_node(out, (a,), "softmax", backward)


def log_softmax(a, axis=-1) -> Tensor:
    a = _lift(a)
    out = _log_softmax(a.data, axis)
    p = np.exp(out)

    def backward(g):
        return (g - p * np.sum(g, axis=axis, keepdims=True),)

    return make_node(out, (a,), "log_softmax", backward)


# -- embeddings, convolution, pooling --------------------------------------

def embedding_lookup(table, indices) -> Tensor:
    """Rows of ``table`` (V, D) gathered by an integer array of any shape."""
    table = _lift(table)
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError("embedding_lookup", table.shape, idx.shape, detail="indices must be integers")
    V, D = table.shape
    if idx.size and (idx.min() < 0 or idx.max() >= V):
        raise IndexError(f"embedding_lookup: index out of range for table with {V} rows")
    out = table.data[idx]

    def backward(g):
        flat = idx.reshape(-1)
        scatter = sp.csr_matrix(
            (np.ones(flat.size, dtype=g.dtype), (flat, np.arange(flat.size))), shape=(V, flat.size)
        )
        return (np.asarray(scatter @ g.reshape(-1, D)),)

    return make_node(out, (table,), "embedding_lookup", backward)


def conv1d(x, weight, bias=None) -> Tensor:
    """Same-padded 1-d convolution.

    ``x`` is (B, L, C_in), ``weight`` is (width, C_in, C_out); output is
    (B, L, C_out). Zero padding puts ``(width - 1) // 2`` steps on the left.
    """
    x = _lift(x)
    weight = _lift(weight, x)
    if x.ndim != 3 or weight.ndim != 3 or x.shape[2] != weight.shape[1]:
        raise ShapeError("conv1d", x.shape, weight.shape)
    parents = [x, weight]
    if bias is not None:
        bias = _lift(bias, x)
        if bias.shape != (weight.shape[2],):
            raise ShapeError("conv1d", weight.shape, bias.shape, detail="bias")
        parents.append(bias)
    B, L, Cin = x.shape
    w, _, Cout = weight.shape
    left = (w - 1) // 2
    xpad = np.pad(x.data, ((0, 0), (left, w - 1 - left), (0, 0)))
    # (B, L, Cin, w) -> (B, L, w, Cin)
    cols = np.ascontiguousarray(sliding_window_view(xpad, w, axis=1).transpose(0, 1, 3, 2))
    cols = cols.reshape(B * L, w * Cin)
    wmat = weight.data.reshape(w * Cin, Cout)
    out = cols @ wmat
    if bias is not None:
        out += bias.data
    out = out.reshape(B, L, Cout)

    def backward(g):
        g2 = g.reshape(B * L, Cout)
        gw = (cols.T @ g2).reshape(w, Cin, Cout)
        gcols = (g2 @ wmat.T).reshape(B, L, w, Cin)
        gpad = np.zeros_like(xpad)
        for k in range(w):
            gpad[:, k:k + L] += gcols[:, :, k]
        gx = gpad[:, left:left + L]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return make_node(out, parents, "conv1d", backward)


def max_pool_over_time(x, mask=None) -> Tensor:
    """Max over the time axis of (B, L, C); ``mask`` (B, L) marks valid steps.

    Rows with no valid step pool to zero.
    """
    x = _lift(x)
    if x.ndim != 3:
        raise ShapeError("max_pool_over_time", x.shape)
    data = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape[:2]:
            raise ShapeError("max_pool_over_time", x.shape, mask.shape, detail="mask")
        data = np.where(mask[:, :, None], data, -np.inf)
    arg = np.argmax(data, axis=1)  # (B, C)
    out = np.take_along_axis(data, arg[:, None, :], axis=1)[:, 0, :]
    empty = ~np.isfinite(out)
    out = np.where(empty, 0.0, out).astype(x.dtype)

    def backward(g):
        gx = np.zeros_like(x.data)
        g = np.where(empty, 0.0, g)
        np.put_along_axis(gx, arg[:, None, :], g[:, None, :], axis=1)
        return (gx,)

    return make_node(out, (x,), "max_pool_over_time", backward)


# -- regularization and normalization --------------------------------------

def dropout(x, p: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: kept units are scaled by 1/(1-p); identity when not training."""
    x = _lift(x)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    rng = rng if rng is not None else np.random.default_rng()
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return make_node(x.data * keep, (x,), "dropout", lambda g: (g * keep,))


def batch_norm_1d(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
                  train: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-feature normalization of (N, F) inputs.

    In training mode batch statistics are used and the running buffers are
    updated in place; otherwise the running buffers are used.
    """
    x = _lift(x)
    gamma = _lift(gamma, x)
    beta = _lift(beta, x)
    if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError("batch_norm_1d", x.shape, gamma.shape, beta.shape)
    n = x.shape[0]
    if train:
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        unbiased = var * n / max(n - 1, 1)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = (xhat * gamma.data + beta.data).astype(x.dtype)

    def backward(g):
        ggamma = np.sum(g * xhat, axis=0)
        gbeta = np.sum(g, axis=0)
        gxhat = g * gamma.data
        if train:
            gx = inv / n * (n * gxhat - gxhat.sum(axis=0) - xhat * np.sum(gxhat * xhat, axis=0))
        else:
            gx = gxhat * inv
        return gx.astype(x.dtype), ggamma, gbeta

    return make_node(out, (x, gamma, beta), "batch_norm_1d", backward)


# -- losses -----------------------------------------------------------------

def cross_entropy(logits, target, weight=None, reduction: str = "mean", allowed=None) -> Tensor:
    """Softmax cross entropy of (N, C) logits against integer targets.

    ``allowed`` (N, C) bool restricts the softmax support per row; ``weight``
    (N,) scales each row's loss. ``mean`` divides by N.
    """
    logits = _lift(logits)
    target = np.asarray(target)
    if logits.ndim != 2 or target.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", logits.shape, target.shape)
    z = logits.data
    if allowed is not None:
        allowed = np.asarray(allowed, dtype=bool)
        if allowed.shape != z.shape:
            raise ShapeError("cross_entropy", z.shape, allowed.shape, detail="allowed")
        z = np.where(allowed, z, -np.inf)
    N = z.shape[0]
    w = np.ones(N, dtype=z.dtype) if weight is None else np.asarray(weight, dtype=z.dtype)
    lsm = _log_softmax(z, axis=1)
    rows = np.arange(N)
    picked = lsm[rows, target]
    active = w != 0
    per = np.where(active, -picked, 0.0)
    scale = 1.0 / N if reduction == "mean" else 1.0
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    loss = np.asarray(np.sum(w * per) * scale, dtype=logits.dtype)

    def backward(g):
        p = np.exp(lsm)
        p[rows, target] -= 1.0
        return ((g * scale) * w[:, None] * p,)

    return make_node(loss, (logits,), "cross_entropy", backward)


def binary_cross_entropy(logits, target) -> Tensor:
    """Mean logistic loss on raw logits."""
    logits = _lift(logits)
    t = np.asarray(target, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise ShapeError("binary_cross_entropy", logits.shape, t.shape)
    z = logits.data
    per = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    loss = np.asarray(per.mean(), dtype=logits.dtype)
    return make_node(loss, (logits,), "binary_cross_entropy",
                     lambda g: (g * (_sigmoid(z) - t) / n,))


def mean_squared_error(pred, target) -> Tensor:
    pred = _lift(pred)
    t = np.asarray(target, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise ShapeError("mean_squared_error", pred.shape, t.shape)
    diff = pred.data - t
    loss = np.asarray(np.mean(diff * diff), dtype=pred.dtype)
    return make_node(loss, (pred,), "mean_squared_error",
                     lambda g: (g * 2.0 * diff / diff.size,))


def weighted_sum(losses, weights) -> Tensor:
    """Sum of ``w_i * loss_i`` over scalar losses."""
    losses = [_lift(l) for l in losses]
    weights = [float(w) for w in weights]
    if len(losses) != len(weights):
        raise ShapeError("weighted_sum", (len(losses),), (len(weights),))
    for l in losses:
        if l.size != 1:
            raise ShapeError("weighted_sum", l.shape, detail="losses must be scalars")
    dtype = losses[0].dtype if losses else np.float64
    total = np.asarray(np.sum([w * l.data for w, l in zip(weights, losses)]), dtype=dtype)
    return make_node(total, losses, "weighted_sum",
                     lambda g: tuple(g * w * np.ones_like(l.data) for w, l in zip(weights, losses)))


# -- recurrent cells (composed from the primitives above) --------------------

def simple_rnn_step(x, h, w_x, w_h, b) -> Tensor:
    return tanh(x @ w_x + h @ w_h + b)


def lstm_step(x, h, c, w_x, w_h, b):
    """One LSTM step; gate order in the packed weights is input, forget, cell, output."""
    H = h.shape[-1]
    z = x @ w_x + h @ w_h + b
    i = sigmoid(z[:, :H])
    f = sigmoid(z[:, H:2 * H])
    g = tanh(z[:, 2 * H:3 * H])
    o = sigmoid(z[:, 3 * H:])
    c_new = f * c + i * g
    return o * tanh(c_new), c_new


def gru_step(x, h, w_x, w_h, b_x, b_h) -> Tensor:
    """One GRU step; gate order is reset, update, candidate."""
    H = h.shape[-1]
    gx = x @ w_x + b_x
    gh = h @ w_h + b_h
    r = sigmoid(gx[:, :H] + gh[:, :H])
    z = sigmoid(gx[:, H:2 * H] + gh[:, H:2 * H])
    n = tanh(gx[:, 2 * H:] + r * gh[:, 2 * H:])
    return (1.0 - z) * n + z * h
