"""Parameter containers shared by every network in the package."""

from __future__ import annotations

import math
from typing import Iterable

import numpy as np

from .autodiff import Parameter, Tensor, linear, relu


def uniform_param(name: str, shape: tuple[int, ...], k: float, rng: np.random.Generator) -> Parameter:
    return Parameter(name, Tensor(rng.uniform(-k, k, size=shape), requires_grad=True, name=name))


def const_param(name: str, values: np.ndarray) -> Parameter:
    return Parameter(name, Tensor(values, requires_grad=True, name=name))


class Module:
    """Anything that owns named parameters.  Sub-modules are discovered from
    attributes, in assignment order, so parameter order is stable."""

    def own_parameters(self) -> list[Parameter]:
        return [v for v in vars(self).values() if isinstance(v, Parameter)]

    def submodules(self) -> list["Module"]:
        out = []
        for v in vars(self).values():
            if isinstance(v, Module):
                out.append(v)
            elif isinstance(v, (list, tuple)):
                out.extend(m for m in v if isinstance(m, Module))
        return out

    def parameters(self) -> list[Parameter]:
        params = list(self.own_parameters())
        for m in self.submodules():
            params.extend(m.parameters())
        return params

    def named_parameters(self) -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for p in self.parameters():
            if p.name in out:
                raise ValueError(f"duplicate parameter name {p.name!r}")
            out[p.name] = p
        return out


class Dense(Module):
    """Affine map ``x W + b`` with optional ReLU."""

    def __init__(self, prefix: str, n_in: int, n_out: int, rng: np.random.Generator, activation: str | None = None):
        k = 1.0 / math.sqrt(n_in)
        self.weight = uniform_param(f"{prefix}.weight", (n_in, n_out), k, rng)
        self.bias = uniform_param(f"{prefix}.bias", (n_out,), k, rng)
        self.activation = activation
        self.n_in, self.n_out = n_in, n_out

    def __call__(self, x) -> Tensor:
        y = linear(x, self.weight.tensor, self.bias.tensor)
        if self.activation == "relu":
            y = relu(y)
        return y

    def np_forward(self, x: np.ndarray) -> np.ndarray:
        y = x @ self.weight.data + self.bias.data
        if self.activation == "relu":
            y = np.maximum(y, 0.0)
        return y


def freeze(params: Iterable[Parameter]) -> None:
    for p in params:
        p.trainable = False
