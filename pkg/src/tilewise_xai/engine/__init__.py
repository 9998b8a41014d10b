"""Float64 compute graph, reverse-mode gradients, and tensor persistence."""

from .autograd import (
    EngineError,
    LayerTap,
    Tensor,
    add,
    add_const,
    affine,
    backward,
    concat_channels,
    conv2d,
    div,
    finite_difference_check,
    flatten,
    log,
    maxpool2x2,
    mul,
    mul_const,
    neg,
    pick,
    reduce_sum,
    relu,
    replay,
    reshape,
    select_max,
    softmax,
    sub,
    upsample,
)
from .checkpoint import CheckpointError, load_tensors, save_tensors

__all__ = [
    "CheckpointError",
    "EngineError",
    "LayerTap",
    "Tensor",
    "add",
    "add_const",
    "affine",
    "backward",
    "concat_channels",
    "conv2d",
    "div",
    "finite_difference_check",
    "flatten",
    "load_tensors",
    "log",
    "maxpool2x2",
    "mul",
    "mul_const",
    "neg",
    "pick",
    "reduce_sum",
    "relu",
    "replay",
    "reshape",
    "save_tensors",
    "select_max",
    "softmax",
    "sub",
    "upsample",
]
