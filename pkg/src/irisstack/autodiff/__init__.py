"""Minimal dense-tensor engine with reverse-mode automatic differentiation."""

from .ops import (
    BatchNormState,
    add,
    batchnorm,
    concat_channels,
    conv3d,
    dense,
    global_avg_pool3d,
    l2_normalize,
    maxpool3d,
    mean,
    mul,
    relu,
    reshape,
    scale,
    softmax_cross_entropy,
    sum,
)
from .tensor import Tensor, backward, make_result

__all__ = [
    "BatchNormState",
    "Tensor",
    "add",
    "backward",
    "batchnorm",
    "concat_channels",
    "conv3d",
    "dense",
    "global_avg_pool3d",
    "l2_normalize",
    "make_result",
    "maxpool3d",
    "mean",
    "mul",
    "relu",
    "reshape",
    "scale",
    "softmax_cross_entropy",
    "sum",
]
