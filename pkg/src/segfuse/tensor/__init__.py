from segfuse.tensor.checkpoint import load_checkpoint, save_checkpoint
from segfuse.tensor.gradcheck import GradientReport, gradient_check, gradient_check_report, numerical_gradient
from segfuse.tensor.nn import Conv1d, Conv2d, LayerNorm, Linear, Module, parameter
from segfuse.tensor.optim import OptimizerKind, OptimizerState, adam, optimizer_step, sgd
from segfuse.tensor.tensor import (
    Tensor,
    add,
    as_tensor,
    bce_with_logits,
    concat,
    conv1d,
    conv2d,
    crop_bilinear,
    elementwise,
    exp,
    layer_norm,
    l2_normalize,
    log,
    matmul,
    mul,
    no_grad,
    record_kinks,
    relu,
    reshape,
    sigmoid,
    softmax,
    tanh,
    transpose,
    upsample_nearest,
)

__all__ = [
    "Conv1d", "Conv2d", "LayerNorm", "Linear", "Module", "OptimizerKind", "OptimizerState",
    "GradientReport", "Tensor", "adam", "add", "as_tensor", "bce_with_logits", "concat", "conv1d", "conv2d",
    "crop_bilinear", "elementwise", "exp", "gradient_check", "gradient_check_report", "layer_norm", "l2_normalize", "load_checkpoint",
    "log", "matmul", "mul", "no_grad", "numerical_gradient", "optimizer_step", "parameter", "record_kinks", "relu",
    "reshape", "save_checkpoint", "sgd", "sigmoid", "softmax", "tanh", "transpose", "upsample_nearest",
]
