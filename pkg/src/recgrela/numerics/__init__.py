"""Tensor arithmetic, reverse-mode differentiation, and numeric utilities."""

from .gradcheck import finite_diff_grad, relative_errors
from .svd import rank, singular_values
from .tensor import (
    Tape,
    Tensor,
    activation,
    active_tape,
    add,
    backward,
    check_finite,
    div,
    drop_path,
    dropout,
    elementwise,
    elu,
    exp,
    gather_rows,
    gelu,
    layer_norm,
    make_rng,
    matmul,
    mul,
    neg,
    record,
    relu,
    reshape,
    select_position,
    sigmoid,
    silu,
    softmax,
    sub,
    tape_paused,
    tmean,
    transpose2d,
    tsum,
)

__all__ = [
    "Tape", "Tensor", "activation", "active_tape", "add", "backward",
    "check_finite", "div", "drop_path", "dropout", "elementwise", "elu",
    "exp", "finite_diff_grad", "gather_rows", "gelu", "layer_norm",
    "make_rng", "matmul", "mul", "neg", "rank", "record", "relative_errors",
    "relu", "reshape", "select_position", "sigmoid", "silu",
    "singular_values", "softmax", "sub", "tape_paused", "tmean",
    "transpose2d", "tsum",
]
