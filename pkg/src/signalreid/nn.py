"""Parameter containers and small layer helpers shared by the modules."""

from __future__ import annotations

import dataclasses
from typing import Iterator

import numpy as np

from .tensor import Tensor, matmul


class ParamSet:
    """Mixin for dataclasses whose Tensor fields (or nested ParamSets) are parameters."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for f in dataclasses.fields(self):
            val = getattr(self, f.name)
            name = f"{prefix}{f.name}"
            if isinstance(val, Tensor):
                yield name, val
            elif isinstance(val, ParamSet):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, dict):
                for key in sorted(val):
                    sub = val[key]
                    if isinstance(sub, ParamSet):
                        yield from sub.named_parameters(f"{name}.{key}.")
                    elif isinstance(sub, Tensor):
                        yield f"{name}.{key}", sub

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]


def param(arr) -> Tensor:
    return Tensor(arr, requires_grad=True)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, *shape: int) -> Tensor:
    shape = shape or (fan_in, fan_out)
    return param(rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=shape))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = matmul(x, w)
    return out if b is None else out + b
