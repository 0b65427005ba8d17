"""Central-difference gradient oracle."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, backward


def numerical_grad(f: Callable[[Tensor], Tensor], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(x)).item()
        flat[i] = orig - h
        fm = f(Tensor(x)).item()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def analytic_grad(f: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    xt = Tensor(x, requires_grad=True)
    backward(f(xt))
    return np.zeros(xt.shape) if xt.grad is None else xt.grad


def finite_diff_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Max over coordinates of |analytic - numeric| / max(1, |numeric|)."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    ga = analytic_grad(f, x)
    gn = numerical_grad(f, x, h)
    if ga.size == 0:
        return 0.0
    return float(np.max(np.abs(ga - gn) / np.maximum(1.0, np.abs(gn))))


def packed(op: Callable[..., Tensor], shapes, seed: int = 99) -> tuple[Callable[[Tensor], Tensor], int]:
    """Scalarize a multi-input op over one flat vector.

    Non-scalar outputs are contracted with fixed random weights so every output
    entry contributes a distinct slope.
    """
    from . import tensor as T

    sizes = [int(np.prod(s)) for s in shapes]
    offs = np.cumsum([0] + sizes)
    weights: dict[str, np.ndarray] = {}

    def f(x: Tensor) -> Tensor:
        args = [T.reshape(x[int(offs[i]):int(offs[i + 1])], tuple(s)) for i, s in enumerate(shapes)]
        out = op(*args)
        if out.size == 1:
            return T.reshape(out, ())
        if "w" not in weights:
            weights["w"] = np.random.default_rng(seed).normal(size=out.shape)
        return T.sum_(out * weights["w"])

    return f, int(offs[-1])
