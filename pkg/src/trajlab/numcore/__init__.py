"""Minimal dense-tensor engine: autodiff ops, Adam, and the checkpoint container."""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .optim import AdamState, GradientError, adam_step, zero_grads
from .tensor import (
    DEFAULT_DTYPE,
    GraphError,
    ShapeError,
    Tensor,
    add,
    apply_rotary,
    concat,
    cross_entropy,
    embedding_lookup,
    gelu,
    grad_enabled,
    layer_norm,
    matmul,
    mse_loss,
    mul,
    no_grad,
    reshape,
    softmax,
    square,
    sub,
    take_rows,
    tanh,
    tensor_mean,
    tensor_sum,
    transpose,
)

__all__ = [
    "DEFAULT_DTYPE",
    "Tensor",
    "ShapeError",
    "GraphError",
    "GradientError",
    "CheckpointError",
    "AdamState",
    "adam_step",
    "zero_grads",
    "no_grad",
    "grad_enabled",
    "add",
    "sub",
    "mul",
    "matmul",
    "take_rows",
    "tanh",
    "gelu",
    "square",
    "softmax",
    "layer_norm",
    "embedding_lookup",
    "apply_rotary",
    "cross_entropy",
    "mse_loss",
    "tensor_sum",
    "tensor_mean",
    "reshape",
    "transpose",
    "concat",
    "save_checkpoint",
    "load_checkpoint",
]
