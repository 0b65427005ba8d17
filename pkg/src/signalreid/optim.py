"""Adam with per-group learning rates."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    A ``None`` gradient counts as zero.
    """
    if len(params) != len(grads):
        raise ValueError(f"got {len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros(p.shape) for p in params]
        state.v = [np.zeros(p.shape) for p in params]
    if len(state.m) != len(params):
        raise ValueError("Adam state does not match the parameter list")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros(p.shape)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise ValueError(f"shape mismatch for param {i}: param {p.shape}, grad {g.shape}, "
                             f"state {state.m[i].shape}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        mhat = state.m[i] / c1
        vhat = state.v[i] / c2
        p.data = p.data - state.lr * mhat / (np.sqrt(vhat) + state.eps)


class Adam:
    """Adam over named parameter groups, each with its own learning rate."""

    def __init__(self, groups: dict[str, tuple[Sequence[Tensor], float]], betas=(0.9, 0.999),
                 eps: float = 1e-8):
        self.params: dict[str, list[Tensor]] = {}
        self.states: dict[str, AdamState] = {}
        for name, (params, lr) in groups.items():
            self.params[name] = list(params)
            self.states[name] = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self) -> None:
        for params in self.params.values():
            for p in params:
                p.grad = None

    def step(self) -> None:
        for name, params in self.params.items():
            adam_step(params, [p.grad for p in params], self.states[name])
