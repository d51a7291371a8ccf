"""Minimal float64 autodiff core: tensors, optimizers, checkpoints."""

from .tensor import (
    Tensor,
    ShapeError,
    add,
    sub,
    mul,
    div,
    scale,
    neg,
    matmul,
    tanh,
    sigmoid,
    relu,
    log,
    softplus,
    clip01,
    mean,
    sum_squares,
    concat,
    stack,
    slice1d,
    row,
    backward,
    as_tensor,
    topo_order,
)
from .optim import OptimizerConfig, ParamStore, optimizer_step, grad_check
from .checkpoint import MAGIC, CheckpointError, save, load, atomic_write_text

__all__ = [
    "Tensor", "ShapeError", "add", "sub", "mul", "div", "scale", "neg", "matmul",
    "tanh", "sigmoid", "relu", "log", "softplus", "clip01", "mean",
    "sum_squares", "concat", "stack", "slice1d", "row", "backward", "as_tensor",
    "topo_order", "OptimizerConfig", "ParamStore", "optimizer_step",
    "grad_check", "MAGIC", "CheckpointError", "save", "load",
    "atomic_write_text",
]
