"""Reverse-mode tape, optimizer, gradient checker, and weight files."""

from .checks import GradCheckReport, grad_check
from .optim import AdamState, adam_step
from .serialize import load_weights, save_weights
from .tensor import (
    NonFiniteError,
    Node,
    Tape,
    Tensor,
    add,
    as_tensor,
    avgpool2x2,
    backward,
    broadcast_to,
    clamp,
    concat,
    cos,
    div,
    exp,
    gather,
    log,
    matmul,
    maximum,
    mean_,
    minimum,
    mul,
    neg,
    relu,
    reshape,
    sigmoid,
    sin,
    slice_,
    softplus,
    sqrt,
    square,
    stack,
    sub,
    sum_,
    tanh,
    transpose,
    value_of,
)

__all__ = [
    "AdamState",
    "GradCheckReport",
    "NonFiniteError",
    "Node",
    "Tape",
    "Tensor",
    "adam_step",
    "add",
    "as_tensor",
    "avgpool2x2",
    "backward",
    "broadcast_to",
    "clamp",
    "concat",
    "cos",
    "div",
    "exp",
    "gather",
    "grad_check",
    "load_weights",
    "log",
    "matmul",
    "maximum",
    "mean_",
    "minimum",
    "mul",
    "neg",
    "relu",
    "reshape",
    "save_weights",
    "sigmoid",
    "sin",
    "slice_",
    "softplus",
    "sqrt",
    "square",
    "stack",
    "sub",
    "sum_",
    "tanh",
    "transpose",
    "value_of",
]
