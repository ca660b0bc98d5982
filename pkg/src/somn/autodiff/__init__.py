"""Numpy-backed reverse-mode autodiff: tensors, ops, Adam, checkpoints."""

from .checkpoint import load_checkpoint, restore_into, save_checkpoint
from .gradcheck import REL_TOL, finite_difference_check, relative_error
from .nn import (
    conv1d,
    dropout,
    gelu,
    layer_norm,
    masked_bce_with_logits,
    masked_cross_entropy,
    masked_mean_pool,
    relu,
    softmax,
    xavier_uniform,
)
from .optim import Adam, decayed_lr
from .tensor import (
    Tensor,
    add,
    backward,
    concat,
    matmul,
    mul,
    neg,
    no_grad,
    reshape,
    scale,
    strict_finite,
    sub,
    tensor_mean,
    tensor_sum,
    transpose,
)

__all__ = [
    "Adam",
    "REL_TOL",
    "Tensor",
    "add",
    "backward",
    "concat",
    "conv1d",
    "decayed_lr",
    "dropout",
    "finite_difference_check",
    "gelu",
    "layer_norm",
    "load_checkpoint",
    "masked_bce_with_logits",
    "masked_cross_entropy",
    "masked_mean_pool",
    "matmul",
    "mul",
    "neg",
    "no_grad",
    "relative_error",
    "relu",
    "reshape",
    "restore_into",
    "save_checkpoint",
    "scale",
    "softmax",
    "strict_finite",
    "sub",
    "tensor_mean",
    "tensor_sum",
    "transpose",
    "xavier_uniform",
]
