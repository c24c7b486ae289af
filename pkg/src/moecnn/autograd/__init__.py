from . import functional
from .nn import BatchNorm2d, Conv2d, Linear, Module, Parameter
from .tensor import (
    NonFiniteError,
    Tensor,
    as_tensor,
    concat,
    default_dtype,
    get_default_dtype,
    is_grad_enabled,
    no_grad,
    scatter_rows,
    set_check_finite,
    set_default_dtype,
    xlogx,
)

__all__ = [
    "BatchNorm2d",
    "Conv2d",
    "Linear",
    "Module",
    "NonFiniteError",
    "Parameter",
    "Tensor",
    "as_tensor",
    "concat",
    "default_dtype",
    "functional",
    "get_default_dtype",
    "is_grad_enabled",
    "no_grad",
    "scatter_rows",
    "set_check_finite",
    "set_default_dtype",
    "xlogx",
]
