"""Minimal float64 tensor math with reverse-mode autodiff."""

from matformer.nn.gradcheck import grad_check
from matformer.nn.ops import (
    ACTIVATIONS,
    activation,
    add,
    concat,
    narrow,
    embedding_lookup,
    layer_norm,
    log_softmax_np,
    matmul,
    mean,
    mul,
    reshape,
    row_slice,
    scale,
    softmax,
    softmax_cross_entropy,
    transpose,
)
from matformer.nn.optim import Adam, adam_step, warmup_inverse_sqrt
from matformer.nn.tensor import Tensor, is_grad_enabled, no_grad, parameter

__all__ = [
    "ACTIVATIONS",
    "Adam",
    "Tensor",
    "activation",
    "adam_step",
    "add",
    "concat",
    "narrow",
    "embedding_lookup",
    "grad_check",
    "is_grad_enabled",
    "layer_norm",
    "log_softmax_np",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "parameter",
    "reshape",
    "row_slice",
    "scale",
    "softmax",
    "softmax_cross_entropy",
    "transpose",
    "warmup_inverse_sqrt",
]
