"""Minimal dense tensors with tape-based reverse-mode differentiation."""

from . import functional
from .functional import ShapeError, trace_ops
from .gradcheck import GradCheckReport, finite_diff_check, gradient_check
from .tensor import DEFAULT_DTYPE, Tape, Tensor, backward, is_grad_enabled, no_grad

__all__ = [
    "DEFAULT_DTYPE",
    "GradCheckReport",
    "ShapeError",
    "Tape",
    "Tensor",
    "backward",
    "finite_diff_check",
    "functional",
    "gradient_check",
    "is_grad_enabled",
    "no_grad",
    "trace_ops",
]
