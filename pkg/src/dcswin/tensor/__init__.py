"""Dense tensor engine with reverse-mode autodiff and the layer primitives."""

from . import nn, ops
from .core import (
    ShapeError,
    Tensor,
    as_tensor,
    default_dtype,
    dtype_scope,
    is_grad_enabled,
    meta_mode,
    no_grad,
)
from .gradcheck import check_gradients, numeric_grad, weighted_sum
from .nn import Parameter

__all__ = [
    "Parameter",
    "ShapeError",
    "Tensor",
    "as_tensor",
    "check_gradients",
    "default_dtype",
    "dtype_scope",
    "is_grad_enabled",
    "meta_mode",
    "nn",
    "no_grad",
    "numeric_grad",
    "ops",
    "weighted_sum",
]
