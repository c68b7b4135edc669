"""Adam optimizer and the staircase learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError, DimensionError


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update, in place on ``params`` (numpy arrays).

    A ``None`` gradient counts as zero.
    """
    if lr <= 0:
        raise ContractError(f"learning rate must be positive, got {lr}")
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise DimensionError("optimizer state does not match the parameter list")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape or m.shape != p.shape:
            raise DimensionError(f"param {p.shape} vs grad {g.shape} / state {m.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    """Adam over a fixed list of :class:`Tensor` parameters."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = AdamState(beta1, beta2, eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, lr):
        adam_step([p.data for p in self.params], [p.grad for p in self.params],
                  self.state, lr)


def staircase_lr(lr0, iteration, decay=0.3, every=400):
    """``lr0 * decay ** floor(iteration / every)``."""
    return lr0 * decay ** (iteration // every)
