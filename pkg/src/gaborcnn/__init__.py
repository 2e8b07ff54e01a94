"""Convolutional networks whose first layer's kernels are synthesized from
learnable Gabor-function parameters, trained end to end by backpropagation,
with a paired experiment harness comparing against standard convolutions.
"""

from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    GaborCnnError,
    NumericError,
    ShapeError,
)
from .gabor import (
    GaborParams,
    GaborParamSet,
    build_filter_bank,
    eval_gabor,
    init_param_set,
    kernel_param_grads,
    make_kernel,
)
from .tensor import ConvGeometry

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ConfigError",
    "ConvGeometry",
    "DataError",
    "GaborCnnError",
    "GaborParams",
    "GaborParamSet",
    "NumericError",
    "ShapeError",
    "build_filter_bank",
    "eval_gabor",
    "init_param_set",
    "kernel_param_grads",
    "make_kernel",
]
