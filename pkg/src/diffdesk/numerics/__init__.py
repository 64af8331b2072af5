"""Tensors, reverse-mode differentiation, and the operator set."""

from .graph import ComputationGraph, evaluate, finite_difference_gradient, gradient
from .kernels import LANE as KERNEL_LANE
from .tensor import (
    Tensor,
    add,
    add_channel,
    affine,
    concat_channels,
    conv2d,
    instance_norm,
    mean_all,
    mse,
    mul,
    scale,
    scale_per_sample,
    set_check_finite,
    shift,
    silu,
    sum_all,
    sum_per_sample,
    time_embedding,
    upsample_nearest2x,
)

__all__ = [
    "ComputationGraph",
    "KERNEL_LANE",
    "Tensor",
    "add",
    "add_channel",
    "affine",
    "concat_channels",
    "conv2d",
    "evaluate",
    "finite_difference_gradient",
    "gradient",
    "instance_norm",
    "mean_all",
    "mse",
    "mul",
    "scale",
    "scale_per_sample",
    "set_check_finite",
    "shift",
    "silu",
    "sum_all",
    "sum_per_sample",
    "time_embedding",
    "upsample_nearest2x",
]
