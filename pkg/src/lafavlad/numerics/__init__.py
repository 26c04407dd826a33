"""Minimal dense-array engine with reverse-mode differentiation."""
from .core import (
    DiffArray,
    Tape,
    absolute,
    add,
    as_array,
    backward,
    batch_norm,
    broadcast_to,
    concat,
    current_tape,
    divide,
    dropout,
    exp,
    finite_check,
    gather_rows,
    grad_enabled,
    leaky_relu,
    log,
    log_softmax,
    matmul,
    multiply,
    no_grad,
    reduce,
    reshape,
    softmax,
    sqrt,
    subtract,
    transpose,
)
from .checkpoint import load_checkpoint, read_arrays, save_checkpoint, write_arrays
from .gradcheck import check_gradients, numeric_gradient, relative_error
from .layers import BlockOptions, Linear, ParamStore, SharedMLP, count_parameters, glorot_uniform

__all__ = [name for name in dir() if not name.startswith("_")]
