"""Minimal deterministic tensor engine with reverse-mode differentiation."""

from .errors import (
    BadMagicError,
    BadVersionError,
    ConfigError,
    ConfigHashMismatchError,
    CsimaskError,
    DimensionError,
    FileFormatError,
    MissingGradientError,
    NonFiniteError,
    ShapeMismatchError,
    TruncatedFileError,
)
from .functional import (
    AttentionBlockParams,
    affine,
    attention_block,
    batch_norm_features,
    conv2d,
    deconv2d,
    layer_norm,
    log_softmax,
    softmax,
)
from .gradcheck import finite_difference_check
from .init import fan_in_uniform, make_rng
from .optim import AdamW
from .tensor import (
    Parameter,
    Tensor,
    as_tensor,
    concat,
    exp,
    getitem,
    log,
    matmul,
    no_grad,
    relu,
    reshape,
    sqrt,
    square,
    stop_gradient,
    tabs,
    take_along,
    tmean,
    transpose,
    tsum,
)

__all__ = [
    "AdamW",
    "AttentionBlockParams",
    "BadMagicError",
    "BadVersionError",
    "ConfigError",
    "ConfigHashMismatchError",
    "CsimaskError",
    "DimensionError",
    "FileFormatError",
    "MissingGradientError",
    "NonFiniteError",
    "Parameter",
    "ShapeMismatchError",
    "Tensor",
    "TruncatedFileError",
    "affine",
    "as_tensor",
    "attention_block",
    "batch_norm_features",
    "concat",
    "conv2d",
    "deconv2d",
    "exp",
    "fan_in_uniform",
    "finite_difference_check",
    "getitem",
    "layer_norm",
    "log",
    "log_softmax",
    "make_rng",
    "matmul",
    "no_grad",
    "relu",
    "reshape",
    "softmax",
    "sqrt",
    "square",
    "stop_gradient",
    "tabs",
    "take_along",
    "tmean",
    "transpose",
    "tsum",
]
