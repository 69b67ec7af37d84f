"""Minimal dense-tensor numerics with reverse-mode differentiation."""

from pdm.ndnum.gradcheck import analytic_grad, grad_check, numeric_grad
from pdm.ndnum.ops import (
    add,
    amax,
    amin,
    concat,
    conv2d,
    cosine,
    div,
    elementwise,
    exp,
    getitem,
    log,
    logsumexp,
    matmul,
    mean,
    mul,
    neg,
    norm,
    pairwise_euclidean,
    power,
    reduce,
    relu,
    reshape,
    row_cosine_matrix,
    sigmoid,
    sqrt,
    sub,
    sum,
    transpose,
)
from pdm.ndnum.tensor import Tape, Tensor, as_tensor, backward

__all__ = [
    "Tape", "Tensor", "add", "amax", "amin", "analytic_grad", "as_tensor", "backward",
    "concat", "conv2d", "cosine", "div", "elementwise", "exp", "getitem", "grad_check",
    "log", "logsumexp", "matmul", "mean", "mul", "neg", "norm", "numeric_grad",
    "pairwise_euclidean", "power", "reduce", "relu", "reshape", "row_cosine_matrix",
    "sigmoid", "sqrt", "sub", "sum", "transpose",
]
