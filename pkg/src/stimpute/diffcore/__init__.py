from . import ops
from .container import ContainerError, load, save
from .gradcheck import gradient_check
from .ops import IndexMap
from .tensor import (NumericError, ShapeError, TapeError, Tensor, backward, finite_checks,
                     no_grad)

__all__ = [
    "ops", "IndexMap", "Tensor", "backward", "gradient_check", "no_grad", "finite_checks",
    "ShapeError", "NumericError", "TapeError", "ContainerError", "load", "save",
]
