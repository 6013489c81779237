"""Numerics substrate: autodiff tensors, keyed random streams, tensor IO."""

from .rng import Rng
from .serialize import (
    read_named_tensor,
    read_tensor_dict,
    write_named_tensor,
    write_tensor_dict,
)
from .tensor import (
    Tensor,
    add,
    backward,
    concat,
    div,
    elementwise,
    embedding,
    grad_enabled,
    masked_fill,
    matmul,
    mul,
    neg,
    no_grad,
    numeric_warning_count,
    reset_numeric_warnings,
    reshape,
    rmsnorm,
    silu,
    softmax_lastdim,
    square,
    sub,
    swapaxes,
    take,
    texp,
    tmean,
    transpose,
    tsqrt,
    tsum,
    ttanh,
)

__all__ = [
    "Rng",
    "Tensor",
    "add",
    "backward",
    "concat",
    "div",
    "elementwise",
    "embedding",
    "grad_enabled",
    "masked_fill",
    "matmul",
    "mul",
    "neg",
    "no_grad",
    "numeric_warning_count",
    "read_named_tensor",
    "read_tensor_dict",
    "reset_numeric_warnings",
    "reshape",
    "rmsnorm",
    "silu",
    "softmax_lastdim",
    "square",
    "sub",
    "swapaxes",
    "take",
    "texp",
    "tmean",
    "transpose",
    "tsqrt",
    "tsum",
    "ttanh",
    "write_named_tensor",
    "write_tensor_dict",
]
