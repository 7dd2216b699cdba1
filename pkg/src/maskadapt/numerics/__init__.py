"""Minimal dense-tensor arithmetic with reverse-mode differentiation."""
from .gradcheck import grad_check, numeric_grad
from .ops import (
    IGNORE_INDEX,
    add,
    bilinear_resize,
    concat,
    conv1x1,
    conv3x3,
    count_multiplies,
    cross_entropy,
    getitem,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    resize_matrix,
    softmax_rows,
    sub,
    sum,
    transpose,
)
from .tensor import DimensionError, GradTape, Tensor, as_tensor, is_grad_enabled, make_node, no_grad

__all__ = [
    "IGNORE_INDEX", "DimensionError", "GradTape", "Tensor", "add", "as_tensor", "bilinear_resize",
    "concat", "conv1x1", "conv3x3", "count_multiplies", "cross_entropy", "getitem", "grad_check",
    "is_grad_enabled", "make_node", "matmul", "mean", "mul", "no_grad", "numeric_grad", "relu",
    "reshape", "resize_matrix", "softmax_rows", "sub", "sum", "transpose",
]
