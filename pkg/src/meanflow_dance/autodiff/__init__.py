"""Small numpy autodiff: reverse-mode tape plus dual-number forward mode."""

from . import ops
from .api import ParameterStore, finite_diff_directional, grad, jvp, relative_error
from .ops import stop_gradient
from .tensor import (
    AutodiffError,
    NonFiniteError,
    Tape,
    Tensor,
    UnsupportedPrimitiveError,
    apply,
    as_tensor,
    check_finite,
    no_grad,
)

__all__ = [
    "AutodiffError",
    "NonFiniteError",
    "ParameterStore",
    "Tape",
    "Tensor",
    "UnsupportedPrimitiveError",
    "apply",
    "as_tensor",
    "check_finite",
    "finite_diff_directional",
    "grad",
    "jvp",
    "no_grad",
    "ops",
    "relative_error",
    "stop_gradient",
]
