"""Minimal reverse-mode autodiff over numpy arrays."""
from .tensor import (
    AutogradError,
    CustomNode,
    Function,
    GradMap,
    NonFiniteError,
    Parameter,
    Tape,
    Tensor,
    active_tape,
    backward_pass,
    default_dtype,
    get_default_dtype,
    grad,
    no_record,
    register_custom,
    set_finite_check,
)
from . import ops
from .ops import (
    ShapeError,
    batch_norm,
    col2im,
    branch_conv2d,
    branch_linear,
    conv2d,
    flatten,
    global_avg_pool,
    im2col,
    linear,
    max_pool2d,
    pad_channels,
    relu,
    softmax_cross_entropy,
)

__all__ = [
    "AutogradError", "CustomNode", "Function", "GradMap", "NonFiniteError", "Parameter", "ShapeError",
    "Tape", "Tensor", "active_tape", "backward_pass", "batch_norm", "branch_conv2d", "branch_linear", "col2im", "conv2d", "default_dtype",
    "flatten", "get_default_dtype", "global_avg_pool", "grad", "im2col", "linear", "max_pool2d", "no_record",
    "ops", "pad_channels", "register_custom", "relu", "set_finite_check", "softmax_cross_entropy",
]
