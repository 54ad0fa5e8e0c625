"""Minimal reverse-mode autodiff on numpy."""

from .tensor import (Tensor, add, concat, exp, getitem, log, make_op, matmul, mean, mul, no_grad, relu,
                     reshape, sub, swapaxes, tanh, transpose, tsum)
from .functional import (BatchNormState, batch_norm_1d, cross_entropy_logits, layer_norm, linear,
                         log_softmax, smooth_l1, softmax_masked)
from .optim import Adam, AdamState, adam_step
from .gradcheck import grad_check, relative_error
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint

__all__ = [
    "Tensor", "add", "concat", "exp", "getitem", "log", "make_op", "matmul", "mean", "mul", "no_grad", "relu",
    "reshape", "sub", "swapaxes", "tanh", "transpose", "tsum", "BatchNormState", "batch_norm_1d",
    "cross_entropy_logits", "layer_norm", "linear", "log_softmax", "smooth_l1", "softmax_masked",
    "Adam", "AdamState", "adam_step", "grad_check", "relative_error", "CheckpointError",
    "load_checkpoint", "save_checkpoint",
]
