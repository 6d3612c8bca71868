"""Minimal reverse-mode differentiation on numpy arrays."""
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .functional import (
    BatchNormState,
    batch_norm,
    frame_stride,
    linear,
    multiscale_graph_conv,
    relu,
    softmax,
    softmax_cross_entropy,
    temporal_conv,
    window_gather,
)
from .gradcheck import GradCheckReport, finite_diff_check
from .optim import OptimizerState, Parameter, lr_schedule, scaled_learning_rate, sgd_step, zero_grad
from .tensor import (
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    contract,
    default_dtype,
    get_default_dtype,
    is_grad_enabled,
    matmul,
    mean,
    mul,
    no_grad,
    pad,
    reshape,
    set_debug,
    set_default_dtype,
    stack,
    sub,
    sum_,
    transpose,
)

__all__ = [
    "BatchNormState", "CheckpointError", "GradCheckReport", "OptimizerState", "Parameter", "Tensor",
    "add", "as_tensor", "backward", "batch_norm", "concat", "contract", "default_dtype",
    "finite_diff_check", "frame_stride", "get_default_dtype", "is_grad_enabled", "linear",
    "load_checkpoint", "lr_schedule", "matmul", "mean", "mul", "multiscale_graph_conv", "no_grad", "pad", "relu", "reshape",
    "save_checkpoint", "scaled_learning_rate", "set_debug", "set_default_dtype", "sgd_step",
    "softmax", "softmax_cross_entropy", "stack", "sub", "sum_", "temporal_conv", "transpose",
    "window_gather", "zero_grad",
]
