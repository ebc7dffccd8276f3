from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import gradcheck
from triage.autodiff import (
    REGISTERED_OPS,
    Adam,
    AdamState,
    ShapeError,
    Tensor,
    adam_step,
    detect_anomalies,
    load_parameters,
    no_grad,
    ops,
    save_parameters,
)


def test_every_registered_op_has_a_gradient_check():
    assert set(REGISTERED_OPS) == set(gradcheck.CASES)


@pytest.mark.parametrize("name", sorted(gradcheck.CASES))
def test_gradient_matches_central_differences(name):
    rng = np.random.default_rng([7, len(name)])
    for _ in range(3):
        assert gradcheck.check_case(name, rng) < 1e-4


def test_matmul_identity():
    A = Tensor(np.random.default_rng(0).normal(size=(4, 3)), requires_grad=True)
    out = ops.matmul(Tensor(np.eye(4)), A)
    np.testing.assert_array_equal(out.data, A.data)
    ops.sum(out).backward()
    np.testing.assert_array_equal(A.grad, np.ones((4, 3)))


def test_uniform_softmax_and_cross_entropy():
    C = 7
    logits = Tensor(np.zeros((3, C)))
    np.testing.assert_allclose(ops.softmax(logits).data, 1.0 / C)
    loss = ops.cross_entropy(logits, np.array([0, 3, 6]))
    assert loss.item() == pytest.approx(math.log(C))


def test_identity_chain_and_fan_out():
    x = Tensor(np.array(2.5), requires_grad=True)
    x.backward()
    assert x.grad == 1.0
    y = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    ops.sum(y + y).backward()
    np.testing.assert_array_equal(y.grad, [2.0, 2.0])
    z = Tensor(np.array(3.0), requires_grad=True)
    (z * z * z).backward()
    assert z.grad == pytest.approx(27.0)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="non-scalar"):
        (x * 2).backward()


def test_shape_error_names_op_and_shapes():
    with pytest.raises(ShapeError) as e:
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
    msg = str(e.value)
    assert "matmul" in msg and "(2, 3)" in msg and "(4, 5)" in msg


def test_three_layer_mlp_gradient():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(5, 4))
    y = rng.integers(0, 3, size=5)
    shapes = [(4, 6), (6,), (6, 5), (5,), (5, 3), (3,)]
    values = [rng.normal(size=s) * 0.5 for s in shapes]

    def loss(ws):
        h = ops.tanh(ops.add(ops.matmul(Tensor(X), ws[0]), ws[1]))
        h = ops.relu(ops.add(ops.matmul(h, ws[2]), ws[3]))
        return ops.cross_entropy(ops.add(ops.matmul(h, ws[4]), ws[5]), y)

    params = [Tensor(v.copy(), requires_grad=True) for v in values]
    loss(params).backward()
    h = 1e-5
    for k, v in enumerate(values):
        num = np.zeros_like(v)
        for i in np.ndindex(v.shape):
            plus = [w.copy() for w in values]
            minus = [w.copy() for w in values]
            plus[k][i] += h
            minus[k][i] -= h
            num[i] = (loss([Tensor(w) for w in plus]).item() - loss([Tensor(w) for w in minus]).item()) / (2 * h)
        assert gradcheck.relative_error(params[k].grad, num) < 1e-4


def test_dropout_statistics():
    x = Tensor(np.ones(100_000))
    assert ops.dropout(x, 0.35, train=False) is x
    out = ops.dropout(x, 0.35, train=True, rng=np.random.default_rng(0)).data
    assert abs(out.mean() - 1.0) < 0.01
    assert abs(np.mean(out == 0) - 0.35) < 0.01
    with pytest.raises(ValueError):
        ops.dropout(x, 1.0, train=True)


def test_batch_norm_train_and_eval():
    rng = np.random.default_rng(0)
    X = rng.normal(loc=5.0, scale=3.0, size=(64, 4))
    rm, rv = np.zeros(4), np.ones(4)
    out = ops.batch_norm_1d(Tensor(X), np.ones(4), np.zeros(4), rm, rv, train=True).data
    assert np.all(np.abs(out.mean(0)) < 1e-6)
    assert np.all(np.abs(out.var(0) - 1.0) < 1e-4)
    np.testing.assert_allclose(rm, 0.1 * X.mean(0))
    # eval mode uses the running buffers, not the batch
    rm2, rv2 = np.full(4, 2.0), np.full(4, 4.0)
    ev = ops.batch_norm_1d(Tensor(X), np.ones(4), np.zeros(4), rm2, rv2, train=False).data
    np.testing.assert_allclose(ev, (X - 2.0) / np.sqrt(4.0 + 1e-5))
    const = ops.batch_norm_1d(Tensor(np.full((8, 2), 3.0)), np.ones(2), np.zeros(2),
                              np.zeros(2), np.ones(2), train=True).data
    np.testing.assert_array_equal(const, 0.0)


@given(st.floats(0.0, 5.0), st.integers(0, 1000))
@settings(max_examples=25, deadline=None)
def test_loss_weight_linearity(w, seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(4, 3))
    y = rng.integers(0, 3, size=4)
    a = Tensor(logits, requires_grad=True)
    ops.cross_entropy(a, y).backward()
    b = Tensor(logits, requires_grad=True)
    ops.weighted_sum([ops.cross_entropy(b, y)], [w]).backward()
    np.testing.assert_allclose(b.grad, w * a.grad, rtol=1e-12, atol=1e-15)


def test_weighted_sum_zero_weight_exact_zero_gradient():
    a = Tensor(np.ones(3), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    ops.weighted_sum([ops.sum(a * a), ops.sum(b * b)], [0.0, 1.0]).backward()
    assert a.grad is None or np.all(a.grad == 0)
    np.testing.assert_array_equal(b.grad, 2.0)


def test_cross_entropy_allowed_mask():
    logits = Tensor(np.array([[0.0, 5.0, 0.0]]))
    allowed = np.array([[True, False, True]])
    assert ops.cross_entropy(logits, np.array([0]), allowed=allowed).item() == pytest.approx(math.log(2))


def test_adam_zero_gradient_and_quadratic():
    p = [np.array([1.0, -2.0])]
    st_ = AdamState()
    adam_step(p, [np.zeros(2)], st_)
    np.testing.assert_array_equal(p[0], [1.0, -2.0])
    assert st_.step == 1
    w = Tensor(np.array(0.0), requires_grad=True)
    opt = Adam([w], lr=0.1)
    for _ in range(500):
        opt.zero_grad()
        d = w - 3.0
        (d * d).backward()
        opt.step()
    assert abs(w.item() - 3.0) < 1e-2


def test_adam_defaults_and_determinism():
    s = AdamState()
    assert (s.learning_rate, s.beta1, s.beta2, s.epsilon) == (0.00025, 0.9, 0.999, 1e-8)
    g = [np.array([0.3, -0.1])]
    a, b = [np.array([1.0, 1.0])], [np.array([1.0, 1.0])]
    adam_step(a, g, AdamState(0.01))
    adam_step(b, g, AdamState(0.01))
    np.testing.assert_array_equal(a[0], b[0])


def test_clip_norm():
    w = Tensor(np.array([0.0, 0.0]), requires_grad=True)
    opt = Adam([w], lr=1.0, clip_norm=1e-3)
    w.grad = np.array([300.0, 400.0])
    opt.step()
    assert np.all(np.abs(w.data) <= 1.0 + 1e-9)


def test_no_grad_and_anomaly_detection():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = x * 2
    assert not y.requires_grad
    with detect_anomalies(), np.errstate(invalid="ignore"):
        with pytest.raises(FloatingPointError, match="log"):
            ops.log(Tensor(np.array([-1.0])))


def test_float32_selectable():
    x = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
    out = ops.sum(ops.tanh(x))
    out.backward()
    assert out.data.dtype == np.float32 and x.grad.dtype == np.float32


def test_checkpoint_round_trip(tmp_path):
    params = {"enc/w": np.random.default_rng(0).normal(size=(3, 4)),
              "enc/b": np.zeros(4, dtype=np.float32),
              "bn/count": np.arange(3, dtype=np.int64)}
    save_parameters(tmp_path / "ck", params)
    raw = (tmp_path / "ck").read_bytes()
    assert raw[:4] == b"ADCK" and raw[4] == 1
    back = load_parameters(tmp_path / "ck")
    assert set(back) == set(params)
    for k in params:
        np.testing.assert_array_equal(back[k], params[k])
        assert back[k].dtype == params[k].dtype
    (tmp_path / "bad").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError):
        load_parameters(tmp_path / "bad")
