"""Dense reverse-mode automatic differentiation on numpy arrays."""

from . import ops
from .checkpoint import load_parameters, save_parameters
from .ops import REGISTERED_OPS
from .optim import Adam, AdamState, adam_step
from .tensor import (
    ShapeError,
    Tensor,
    as_tensor,
    detect_anomalies,
    grad_enabled,
    no_grad,
    set_default_dtype,
)

__all__ = [
    "Adam", "AdamState", "REGISTERED_OPS", "ShapeError", "Tensor", "adam_step",
    "as_tensor", "detect_anomalies", "grad_enabled", "load_parameters", "no_grad",
    "ops", "save_parameters", "set_default_dtype",
]
