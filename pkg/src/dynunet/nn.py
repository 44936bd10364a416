"""Module containers and the basic layers the networks are assembled from."""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterator, Optional

import numpy as np

from . import functional as F
from .tensor import Tensor, default_dtype


def kaiming_std(fan_in: int, slope: float = 0.01) -> float:
    return math.sqrt(2.0 / ((1.0 + slope * slope) * fan_in))


def Parameter(data: np.ndarray, name: Optional[str] = None) -> Tensor:
    return Tensor(np.ascontiguousarray(data), requires_grad=True, name=name)


class Module:
    """Parameter holder; parameters and submodules are discovered from attributes
    in assignment order, which fixes the naming used by checkpoints."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for key, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{key}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.data.copy()) for k, p in self.named_parameters())

    def load_state_dict(self, state: dict) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for k, p in own.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} != expected {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def to(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class ModuleList(Module):
    def __init__(self, modules=()):
        self._items = list(modules)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for i, m in enumerate(self._items):
            yield from m.named_parameters(f"{prefix}{i}.")

    def modules(self) -> Iterator[Module]:
        yield self
        for m in self._items:
            yield from m.modules()

    def __getitem__(self, i):
        return self._items[i]

    def __setitem__(self, i, m):
        self._items[i] = m

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return iter(self._items)


def _normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(default_dtype())


class Conv2d(Module):
    def __init__(self, cin, cout, kernel, rng, stride=1, padding=None, bias=True, zero_init=False, slope=0.01):
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        shape = (cout, cin, kernel, kernel)
        if zero_init:
            w = np.zeros(shape, dtype=default_dtype())
        else:
            w = _normal(rng, shape, kaiming_std(cin * kernel * kernel, slope))
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(cout, dtype=default_dtype())) if bias else None

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class ConvTranspose2d(Module):
    """2x2 / stride-2 transposed convolution."""

    def __init__(self, cin, cout, rng, slope=0.01):
        self.weight = Parameter(_normal(rng, (cin, cout, 2, 2), kaiming_std(cin, slope)))
        self.bias = Parameter(np.zeros(cout, dtype=default_dtype()))

    def forward(self, x):
        return F.conv_transpose2d(x, self.weight, self.bias)


class Linear(Module):
    def __init__(self, cin, cout, rng, slope=0.01):
        self.weight = Parameter(_normal(rng, (cout, cin), kaiming_std(cin, slope)))
        self.bias = Parameter(np.zeros(cout, dtype=default_dtype()))

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class InstanceNorm2d(Module):
    def __init__(self, channels, eps=1e-5):
        self.eps = eps
        self.weight = Parameter(np.ones(channels, dtype=default_dtype()))
        self.bias = Parameter(np.zeros(channels, dtype=default_dtype()))

    def forward(self, x):
        return F.instance_norm(x, self.weight, self.bias, self.eps)


class ConvNormAct(Module):
    """conv (no bias: the norm removes it) -> instance norm -> leaky ReLU."""

    def __init__(self, cin, cout, rng, kernel=3, stride=1, slope=0.01):
        self.slope = slope
        self.conv = Conv2d(cin, cout, kernel, rng, stride=stride, bias=False, slope=slope)
        self.norm = InstanceNorm2d(cout)

    def forward(self, x):
        return F.leaky_relu(self.norm(self.conv(x)), self.slope)


class DoubleConv(Module):
    def __init__(self, cin, cout, rng, slope=0.01):
        self.conv1 = ConvNormAct(cin, cout, rng, slope=slope)
        self.conv2 = ConvNormAct(cout, cout, rng, slope=slope)

    def forward(self, x):
        return self.conv2(self.conv1(x))


class MaxPool2d(Module):
    def forward(self, x):
        return F.max_pool2d(x, 2)


class AvgPool2d(Module):
    def forward(self, x):
        return F.avg_pool2d(x, 2, 2)


class StridedConvDown(Module):
    """Stride-2 3x3 conv block used in place of pooling."""

    def __init__(self, channels, rng, slope=0.01):
        self.block = ConvNormAct(channels, channels, rng, stride=2, slope=slope)

    def forward(self, x):
        return self.block(x)
