"""Tensor with define-by-run reverse-mode differentiation.

Every tensor gets a monotonically increasing id at construction. Inputs are
always created before outputs, so sorting reachable nodes by id is a valid
topological order for the backward sweep.
"""

from __future__ import annotations

import contextlib
import itertools
import threading

import numpy as np

_state = threading.local()
_ids = itertools.count()

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    def __init__(self, op: str, *shapes, detail: str = ""):
        msg = f"{op}: incompatible shapes " + ", ".join(str(tuple(s)) for s in shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


def grad_enabled() -> bool:
    return getattr(_state, "grad", True)


def check_finite_enabled() -> bool:
    return getattr(_state, "check_finite", False)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


@contextlib.contextmanager
def detect_anomalies():
    """Raise ``FloatingPointError`` from the first op producing a non-finite value."""
    prev = check_finite_enabled()
    _state.check_finite = True
    try:
        yield
    finally:
        _state.check_finite = prev


def set_default_dtype(dtype) -> None:
    global DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float64, np.float32):
        raise ValueError("default dtype must be float64 or float32")
    DEFAULT_DTYPE = dtype


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, op: str = "leaf"):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = op
        self.id = next(_ids)
        self._parents = ()
        self._backward = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    # -- graph ----------------------------------------------------------
    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring grad."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() on non-scalar tensor of shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.data.shape:
            raise ShapeError("backward", grad.shape, self.data.shape)
        if not self.requires_grad:
            return

        nodes = {}
        stack = [self]
        while stack:
            t = stack.pop()
            if t.id in nodes:
                continue
            nodes[t.id] = t
            stack.extend(p for p in t._parents if p.requires_grad)

        grads = {self.id: grad}
        for tid in sorted(nodes, reverse=True):
            t = nodes[tid]
            g = grads.pop(tid, None)
            if g is None:
                continue
            if t._backward is None:
                t.grad = g.copy() if t.grad is None else t.grad + g
                continue
            for p, pg in zip(t._parents, t._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                prev = grads.get(p.id)
                grads[p.id] = pg if prev is None else prev + pg

    # -- operators ------------------------------------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, idx):
        from . import ops
        return ops.getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis, keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        return ops.transpose(self, axes or None)

    @property
    def T(self):
        return self.transpose()


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def make_node(data, parents, op: str, backward) -> Tensor:
    """Wrap an op result; record the backward closure only when needed."""
    out = Tensor(data, op=op)
    if check_finite_enabled() and np.issubdtype(out.data.dtype, np.floating):
        if not np.all(np.isfinite(out.data)):
            raise FloatingPointError(f"{op} produced non-finite values")
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out
