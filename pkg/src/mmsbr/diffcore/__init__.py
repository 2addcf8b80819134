"""Tape-based reverse-mode autodiff over dense numpy tensors."""

from .kernels import backend
from .tensor import (
    ShapeError,
    SQRT_GUARD_EPS,
    Tape,
    Tensor,
    active_tape,
    add,
    attn_apply,
    backward,
    broadcast_to,
    clamp_min,
    concat,
    constant,
    cosine_similarity,
    elu,
    elu1p,
    gather_positions,
    gather_rows,
    layer_norm,
    log,
    masked_fill,
    matmul,
    mean,
    mul,
    normalize_rows,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax,
    split,
    sqrt,
    square,
    stack,
    sum_,
    transpose,
)
from .params import ModelParams
from .gradcheck import GradCheckReport, finite_diff_check, relative_error

__all__ = [
    "ShapeError",
    "SQRT_GUARD_EPS",
    "Tape",
    "Tensor",
    "ModelParams",
    "GradCheckReport",
    "active_tape",
    "add",
    "attn_apply",
    "backend",
    "backward",
    "broadcast_to",
    "clamp_min",
    "concat",
    "constant",
    "cosine_similarity",
    "elu",
    "elu1p",
    "finite_diff_check",
    "gather_positions",
    "gather_rows",
    "layer_norm",
    "log",
    "masked_fill",
    "matmul",
    "mean",
    "mul",
    "normalize_rows",
    "relative_error",
    "relu",
    "reshape",
    "scale",
    "sigmoid",
    "softmax",
    "split",
    "sqrt",
    "square",
    "stack",
    "sum_",
    "transpose",
]
