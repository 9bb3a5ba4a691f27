"""Minimal channels-last tensor library with reverse-mode differentiation."""

from .core import (
    ShapeError,
    StateError,
    Tensor,
    as_tensor,
    backprop,
    degeneracy_count,
    grad_of,
    no_grad,
    parameter,
    reset_degeneracy,
    zero_grad,
)
from .gradcheck import GradCheckResult, grad_check, primitive_suite
from .io import load, save

__all__ = [
    "ShapeError",
    "StateError",
    "Tensor",
    "GradCheckResult",
    "as_tensor",
    "backprop",
    "degeneracy_count",
    "grad_check",
    "grad_of",
    "load",
    "no_grad",
    "parameter",
    "primitive_suite",
    "reset_degeneracy",
    "save",
    "zero_grad",
]
