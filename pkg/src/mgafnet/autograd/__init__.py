from .tensor import (Tape, Tensor, NonFiniteError, as_tensor, backward, default_dtype,
                     is_grad_enabled, no_grad, precision, verification)
from .ops import (add, concat, conv_spatial, conv_temporal, cross_entropy, layer_norm,
                  log_softmax, matmul, mean, mul, pointwise, pool, power, relu, reshape,
                  resample_time, sigmoid, softmax, sub, transpose)
from .gradcheck import GradCheckReport, grad_check
from .optim import SGD, clip_grad_norm, sgd_step
from .module import Module

__all__ = [
    "Tape", "Tensor", "NonFiniteError", "as_tensor", "backward", "default_dtype",
    "is_grad_enabled", "no_grad", "precision", "verification",
    "add", "concat", "conv_spatial", "conv_temporal", "cross_entropy", "layer_norm",
    "log_softmax", "matmul", "mean", "mul", "pointwise", "pool", "power", "relu", "reshape",
    "resample_time", "sigmoid", "softmax", "sub", "transpose",
    "GradCheckReport", "grad_check", "SGD", "sgd_step", "clip_grad_norm", "Module",
]
