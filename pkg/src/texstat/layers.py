"""Parameter containers and the basic learnable layers."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .nn_ops import conv2d
from .tensor import Tensor


class Module:
    """Holds parameters and submodules as attributes; names follow attribute paths."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def uniform_param(rng: np.random.Generator, shape, fan_in: int, dtype, gain: float = 1.0) -> Tensor:
    bound = gain / np.sqrt(max(fan_in, 1))
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def zeros_param(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


class Conv2d(Module):
    def __init__(self, rng, c_in: int, c_out: int, k: int = 1, padding: int = 0, dilation: int = 1,
                 dtype=np.float32, gain: float = np.sqrt(6.0)):
        self.weight = uniform_param(rng, (c_out, c_in, k, k), c_in * k * k, dtype, gain)
        self.bias = zeros_param((c_out,), dtype)
        self.padding = padding
        self.dilation = dilation

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, padding=self.padding, dilation=self.dilation)


class Linear(Module):
    """Affine map on the last axis: ``x @ weight + bias`` with weight ``in×out``."""

    def __init__(self, rng, d_in: int, d_out: int, dtype=np.float32, gain: float = 1.0):
        self.weight = uniform_param(rng, (d_in, d_out), d_in, dtype, gain)
        self.bias = zeros_param((d_out,), dtype)

    def forward(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.weight) + self.bias


class DoubleConv(Module):
    def __init__(self, rng, c_in: int, c_out: int, dtype=np.float32):
        self.conv1 = Conv2d(rng, c_in, c_out, 3, padding=1, dtype=dtype)
        self.conv2 = Conv2d(rng, c_out, c_out, 3, padding=1, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return T.relu(self.conv2(T.relu(self.conv1(x))))
