"""Minimal float64 tensor engine with tape-based reverse-mode gradients."""
from reco.numcore.gradcheck import finite_diff_check, numeric_gradient, relative_error
from reco.numcore.nn import linear, mhsa, mlp
from reco.numcore.tensor import (
    GradTape,
    Gradients,
    Tensor,
    add,
    add_bias,
    backward,
    bmm,
    clamped_exp,
    diagonal,
    dot,
    gelu,
    l2_normalize_rows,
    layer_norm,
    log_softmax_rows,
    matmul,
    mean_all,
    mul,
    paired_nce,
    parameters_of,
    reshape,
    scale,
    scale_by,
    slice_tokens,
    softmax_rows,
    sum_all,
    take,
    transpose,
)

__all__ = [
    "GradTape", "Gradients", "Tensor", "add", "add_bias", "backward", "bmm",
    "clamped_exp", "diagonal", "dot", "finite_diff_check", "gelu",
    "l2_normalize_rows", "layer_norm", "linear", "log_softmax_rows", "matmul",
    "mean_all", "mhsa", "mlp", "mul", "numeric_gradient", "paired_nce", "parameters_of",
    "relative_error", "reshape", "scale", "scale_by", "slice_tokens", "softmax_rows",
    "sum_all", "take", "transpose",
]
