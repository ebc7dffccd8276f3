"""Parameterized building blocks on top of the autodiff ops."""

from __future__ import annotations

import numpy as np

from ..autodiff import Tensor, ops


class Module:
    """Owns named parameters (``Tensor`` leaves) and non-trainable buffers."""

    def __init__(self):
        self._params = {}
        self._buffers = {}
        self._children = {}

    def param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True)
        self._params[name] = t
        return t

    def buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        self._buffers[name] = value
        return value

    def child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = ""):
        for n, t in self._params.items():
            yield prefix + n, t
        for n, m in self._children.items():
            yield from m.named_parameters(f"{prefix}{n}.")

    def named_buffers(self, prefix: str = ""):
        for n, b in self._buffers.items():
            yield prefix + n, b
        for n, m in self._children.items():
            yield from m.named_buffers(f"{prefix}{n}.")

    def parameters(self) -> list:
        return [t for _, t in self.named_parameters()]


def glorot(rng, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng, dtype):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        self.weight = self.param("weight", glorot(rng, (n_in, n_out), n_in, n_out, dtype))
        self.bias = self.param("bias", np.zeros(n_out, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class Embedding(Module):
    def __init__(self, n_rows: int, dim: int, rng, dtype):
        super().__init__()
        self.table = self.param("table", (rng.normal(size=(n_rows, dim)) / np.sqrt(dim)).astype(dtype))

    def __call__(self, idx: np.ndarray) -> Tensor:
        return ops.embedding_lookup(self.table, idx)


class FCStack(Module):
    """Linear layers each followed by an activation and dropout."""

    def __init__(self, n_in: int, sizes, rng, dtype, activation="relu", dropout=0.0):
        super().__init__()
        self.layers = []
        for i, n in enumerate(sizes):
            self.layers.append(self.child(f"fc{i}", Linear(n_in, n, rng, dtype)))
            n_in = n
        self.width = n_in
        self.act = ops.relu if activation == "relu" else ops.tanh
        self.dropout = float(dropout)

    def __call__(self, x: Tensor, train: bool, rng) -> Tensor:
        for layer in self.layers:
            x = ops.dropout(self.act(layer(x)), self.dropout, train, rng)
        return x


class BatchNorm(Module):
    def __init__(self, n: int, dtype):
        super().__init__()
        self.gamma = self.param("gamma", np.ones(n, dtype=dtype))
        self.beta = self.param("beta", np.zeros(n, dtype=dtype))
        self.running_mean = self.buffer("running_mean", np.zeros(n, dtype=dtype))
        self.running_var = self.buffer("running_var", np.ones(n, dtype=dtype))

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        return ops.batch_norm_1d(x, self.gamma, self.beta, self.running_mean, self.running_var, train)


GATES = {"simple": 1, "lstm": 4, "gru": 3}


class Cell(Module):
    """One recurrent cell of any supported type; state is ``(h, c)`` with ``c`` unused unless LSTM."""

    def __init__(self, cell_type: str, n_in: int, size: int, rng, dtype):
        super().__init__()
        self.cell_type, self.size = cell_type, size
        k = GATES[cell_type]
        self.w_x = self.param("w_x", glorot(rng, (n_in, k * size), n_in, size, dtype))
        self.w_h = self.param("w_h", glorot(rng, (size, k * size), size, size, dtype))
        b = np.zeros(k * size, dtype=dtype)
        if cell_type == "lstm":
            b[size:2 * size] = 1.0  # forget gate bias
        self.b = self.param("b", b)
        if cell_type == "gru":
            self.b_h = self.param("b_h", np.zeros(k * size, dtype=dtype))

    def __call__(self, x, h, c=None):
        if self.cell_type == "simple":
            return ops.simple_rnn_step(x, h, self.w_x, self.w_h, self.b), c
        if self.cell_type == "gru":
            return ops.gru_step(x, h, self.w_x, self.w_h, self.b, self.b_h), c
        return ops.lstm_step(x, h, c, self.w_x, self.w_h, self.b)


class RNN(Module):
    """Masked multi-layer (optionally bidirectional) recurrence over (B, L, C).

    Padding steps leave the state unchanged, so the final state of each row is
    the state after its last valid step. The backward direction reverses each
    row's valid prefix in place.
    """

    def __init__(self, cell_type, n_in, size, num_layers, bidirectional, rng, dtype):
        super().__init__()
        self.dirs = 2 if bidirectional else 1
        self.size = size
        self.cells = []
        for layer in range(num_layers):
            row = []
            for d in range(self.dirs):
                row.append(self.child(f"l{layer}d{d}", Cell(cell_type, n_in, size, rng, dtype)))
            self.cells.append(row)
            n_in = size * self.dirs
        self.width = size * self.dirs

    def _run(self, cell: Cell, x: Tensor, mask: np.ndarray):
        B, L, _ = x.shape
        h = Tensor(np.zeros((B, self.size), dtype=x.dtype))
        c = h if cell.cell_type == "lstm" else None
        outs = []
        m = mask.astype(x.dtype)
        for t in range(L):
            h_new, c_new = cell(x[:, t, :], h, c)
            keep = m[:, t:t + 1]
            h = h_new * keep + h * (1.0 - keep)
            if c is not None:
                c = c_new * keep + c * (1.0 - keep)
            outs.append(h)
        return ops.stack(outs, axis=1), h

    def __call__(self, x: Tensor, mask: np.ndarray):
        B, L, _ = x.shape
        lengths = mask.sum(axis=1)
        t = np.arange(L)[None, :]
        rev = np.where(t < lengths[:, None], lengths[:, None] - 1 - t, t)
        rows = np.arange(B)[:, None]
        finals = []
        for row in self.cells:
            outs, finals = [], []
            for d, cell in enumerate(row):
                xin = x if d == 0 else x[rows, rev]
                seq, h = self._run(cell, xin, mask)
                outs.append(seq if d == 0 else seq[rows, rev])
                finals.append(h)
            x = outs[0] if len(outs) == 1 else ops.concat(outs, axis=2)
        final = finals[0] if len(finals) == 1 else ops.concat(finals, axis=1)
        return x, final
