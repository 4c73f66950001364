from dgqn.numerics.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from dgqn.numerics.gradcheck import grad_check
from dgqn.numerics.params import ParamStore, optimizer_step
from dgqn.numerics.tensor import (
    Tensor,
    Trace,
    add,
    as_tensor,
    backward,
    concat,
    conv2d,
    gather_sum,
    masked_row_softmax,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    sigmoid,
    softmax,
    square,
    stop_gradient,
    sub,
    total,
)

__all__ = [
    "CheckpointError", "ParamStore", "Tensor", "Trace", "add", "as_tensor", "backward", "concat",
    "conv2d", "gather_sum", "grad_check", "load_checkpoint", "masked_row_softmax", "matmul", "mean",
    "mul", "optimizer_step", "relu", "reshape", "save_checkpoint", "sigmoid", "softmax", "square",
    "stop_gradient", "sub", "total",
]
