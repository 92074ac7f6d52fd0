from . import ops
from .gradcheck import grad_check, relative_error
from .nn import Conv2d, Dense, DepthwiseConv2d, LayerNorm, Module, Parameter
from .rng import Rng, fnv1a64
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    backward,
    detect_anomaly,
    no_grad,
)

__all__ = [
    "Conv2d", "Dense", "DepthwiseConv2d", "LayerNorm", "Module", "NonFiniteError", "Parameter",
    "Rng", "ShapeError", "Tape", "Tensor", "backward", "detect_anomaly", "fnv1a64", "grad_check",
    "no_grad", "ops", "relative_error",
]
