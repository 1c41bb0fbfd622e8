"""Minimal dense-tensor engine with reverse-mode automatic differentiation."""
from .engine import (
    ShapeError,
    Tape,
    Tensor,
    add,
    backward,
    binary_cross_entropy,
    cross_entropy,
    dropout,
    embedding,
    gather_positions,
    gelu,
    layer_norm,
    masked_mean_weights,
    matmul,
    mul,
    reshape,
    scale,
    select,
    sigmoid,
    softmax,
    sum_all,
    transpose,
)
from .gradcheck import grad_check
from .kernels import BACKEND

__all__ = [
    "BACKEND", "ShapeError", "Tape", "Tensor", "add", "backward",
    "binary_cross_entropy", "cross_entropy", "dropout", "embedding",
    "gather_positions", "gelu", "grad_check", "layer_norm", "masked_mean_weights", "matmul", "mul",
    "reshape", "scale", "select", "sigmoid", "softmax", "sum_all", "transpose",
]
