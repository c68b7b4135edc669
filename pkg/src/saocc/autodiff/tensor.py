"""Tensor and tape-based reverse-mode graph.

Every differentiable operation appends a node to the active :class:`Graph`.
Nodes are stored in creation order, which is a valid topological order, and
:func:`backward` walks them in exact reverse.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from ..errors import ContractError, NonFiniteError

_local = threading.local()


class Node:
    __slots__ = ("kind", "inputs", "backward_fn", "graph", "index")

    def __init__(self, kind, inputs, backward_fn, graph, index):
        self.kind = kind
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.graph = graph
        self.index = index


class Graph:
    """Ordered record of operations for one forward pass.

    A graph supports exactly one backward pass. Use it as a context manager
    to isolate a computation from the thread's default graph.
    """

    def __init__(self):
        self.nodes = []
        self.consumed = False

    def record(self, kind, inputs, backward_fn):
        if self.consumed:
            raise ContractError("graph was already consumed by backward()")
        node = Node(kind, inputs, backward_fn, self, len(self.nodes))
        self.nodes.append(node)
        return node

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False


def _stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_graph():
    """The innermost entered graph, or this thread's default graph."""
    stack = _stack()
    if stack:
        return stack[-1]
    g = getattr(_local, "default", None)
    if g is None or g.consumed:
        g = _local.default = Graph()
    return g


def grad_enabled():
    return not getattr(_local, "no_grad", False)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    prev = getattr(_local, "no_grad", False)
    _local.no_grad = True
    try:
        yield
    finally:
        _local.no_grad = prev


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.node = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        from .ops import add
        return add(self, other)

    def __neg__(self):
        from .ops import scale
        return scale(self, -1.0)


def make_result(kind, data, inputs, backward_fn):
    """Wrap an op output, recording a node when any input needs gradients.

    ``backward_fn(grad_out)`` must return one gradient (or None) per input.
    """
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{kind}: non-finite values in output")
    out = Tensor(data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        graph = None
        for t in inputs:
            if t.node is not None:
                if graph is None:
                    graph = t.node.graph
                elif t.node.graph is not graph:
                    raise ContractError(f"{kind}: inputs belong to different graphs")
        if graph is None:
            graph = active_graph()
        out.requires_grad = True
        out.node = graph.record(kind, tuple(inputs), backward_fn)
    return out


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Leaves whose ``grad`` is None get a fresh array; existing arrays are
    accumulated into, so call ``zero_grad`` between steps.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        raise ContractError("loss is not attached to a graph")
    graph = loss.node.graph
    if graph.consumed:
        raise ContractError("second backward() on the same graph")
    nodes = graph.nodes
    grads = [None] * len(nodes)
    grads[loss.node.index] = np.ones_like(loss.data)
    for idx in range(loss.node.index, -1, -1):
        g = grads[idx]
        if g is None:
            continue
        node = nodes[idx]
        in_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t.node is not None:
                j = t.node.index
                grads[j] = gi if grads[j] is None else grads[j] + gi
            elif t.grad is None:
                t.grad = np.array(gi, dtype=np.float64, copy=True).reshape(t.shape)
            else:
                t.grad += gi.reshape(t.shape)
        grads[idx] = None
    graph.consumed = True
    graph.nodes = []
