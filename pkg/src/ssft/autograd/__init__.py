"""Reverse-mode differentiable numerics on numpy arrays."""
from .gradcheck import GradCheckReport, grad_check
from .ops import (
    BatchNormState,
    absolute,
    add,
    batchnorm2d,
    bce_with_logits,
    conv1x1,
    conv3x3,
    cross_entropy,
    gelu,
    layernorm,
    linear,
    matmul,
    maxpool2d,
    mean,
    mul,
    multi_head_attention,
    reshape,
    softmax,
    transpose,
)
from .tensor import Tensor, as_tensor, backward, no_grad

__all__ = [
    "BatchNormState", "GradCheckReport", "Tensor", "absolute", "add", "as_tensor", "backward",
    "batchnorm2d", "bce_with_logits", "conv1x1", "conv3x3", "cross_entropy", "gelu",
    "grad_check", "layernorm", "linear", "matmul", "maxpool2d", "mean", "mul",
    "multi_head_attention", "no_grad", "reshape", "softmax", "transpose",
]
