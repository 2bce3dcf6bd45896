"""Dense-tensor computation substrate with reverse-mode differentiation.

Everything runs in float64 numpy internally; float32 appears only at the
checkpoint storage boundary.
"""

from .tensor import (
    Tensor,
    ShapeError,
    no_grad,
    grad_enabled,
    backward,
    add,
    sub,
    mul,
    neg,
    add_scalar,
    mul_scalar,
    matmul,
    transpose_last2,
    reshape,
    broadcast_to,
    sigmoid,
    gelu,
    softmax,
    layer_norm,
    tensor_sum,
    tensor_mean,
    concat,
    slice_axis,
    embedding_lookup,
    gather_cols,
    scatter_cols,
    cross_entropy,
    top_k,
    CE_EPS,
)
from .gradcheck import check_gradients, finite_difference_grad, GradReport
from .optim import AdamW
from .checkpoint import save_checkpoint, load_checkpoint, CheckpointError

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "grad_enabled",
    "backward",
    "add",
    "sub",
    "mul",
    "neg",
    "add_scalar",
    "mul_scalar",
    "matmul",
    "transpose_last2",
    "reshape",
    "broadcast_to",
    "sigmoid",
    "gelu",
    "softmax",
    "layer_norm",
    "tensor_sum",
    "tensor_mean",
    "concat",
    "slice_axis",
    "embedding_lookup",
    "gather_cols",
    "scatter_cols",
    "cross_entropy",
    "top_k",
    "CE_EPS",
    "check_gradients",
    "finite_difference_grad",
    "GradReport",
    "AdamW",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]
