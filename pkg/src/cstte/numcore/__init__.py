"""Minimal reverse-mode automatic differentiation over dense f64 buffers.

Everything the encoder and the training loops need lives here: the tape,
the differentiable operators, the Adam optimizer, the binary parameter
container, and the finite-difference gradient checker.
"""

from cstte.numcore.tape import (
    DiffArray,
    Tape,
    active_tape,
    backward,
    constant,
    parameter,
    recording,
    set_deterministic,
    deterministic_mode,
)
from cstte.numcore.ops import (
    add,
    add_row,
    concat_cols,
    cross_entropy_mean,
    dot,
    feed_forward,
    gather_rows,
    l2_normalize,
    layer_norm,
    logsumexp,
    matmul,
    mean_rows,
    mul,
    multi_head_attention,
    pick,
    relu,
    reshape,
    scale,
    softmax_rows,
    stack_scalars,
    sub,
    sum_all,
    trig_encode,
)
from cstte.numcore.adam import AdamState, adam_step
from cstte.numcore.container import read_arrays, write_arrays, CONTAINER_MAGIC

__all__ = [
    "DiffArray",
    "Tape",
    "active_tape",
    "backward",
    "constant",
    "parameter",
    "recording",
    "set_deterministic",
    "deterministic_mode",
    "add",
    "add_row",
    "concat_cols",
    "cross_entropy_mean",
    "dot",
    "feed_forward",
    "gather_rows",
    "l2_normalize",
    "layer_norm",
    "logsumexp",
    "matmul",
    "mean_rows",
    "mul",
    "multi_head_attention",
    "pick",
    "relu",
    "reshape",
    "scale",
    "softmax_rows",
    "stack_scalars",
    "sub",
    "sum_all",
    "trig_encode",
    "AdamState",
    "adam_step",
    "read_arrays",
    "write_arrays",
    "CONTAINER_MAGIC",
]
