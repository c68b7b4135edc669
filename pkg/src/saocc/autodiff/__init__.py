"""Minimal reverse-mode differentiation for the occupancy network."""

from .ops import (
    as_tensor,
    abs,
    add,
    bce,
    concat,
    conv3d,
    elementwise,
    gather_rows,
    linear,
    mean,
    relu,
    resample3d,
    reshape,
    scale,
    scatter_mean,
    segment_mean,
    sigmoid,
    sum,
    trilinear_query,
)
from .optim import Adam, AdamState, adam_step, staircase_lr
from .tensor import Graph, Tensor, active_graph, backward, no_grad

__all__ = [
    "Adam", "AdamState", "Graph", "Tensor", "abs", "as_tensor", "active_graph", "adam_step", "add",
    "backward", "bce", "concat", "conv3d", "elementwise", "gather_rows", "linear", "mean",
    "no_grad", "relu", "resample3d", "reshape", "scale", "scatter_mean", "segment_mean", "sigmoid",
    "staircase_lr", "sum", "trilinear_query",
]
