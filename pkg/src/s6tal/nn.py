"""Parameter containers built on :mod:`s6tal.tensor`."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Holds parameters and sub-modules in attribute order.

    A module object referenced from two places is enumerated once, so weight
    sharing shows up directly in :func:`param_count`.
    """

    training: bool = True

    def _children(self) -> Iterator[tuple[str, object]]:
        for k, v in vars(self).items():
            if k.startswith("_"):
                continue
            if isinstance(v, (Module, Tensor)):
                yield k, v
            elif isinstance(v, (list, tuple)) and v and all(isinstance(e, Module) for e in v):
                for i, e in enumerate(v):
                    yield f"{k}.{i}", e

    def named_parameters(self, prefix: str = "", _seen: set | None = None) -> Iterator[tuple[str, Tensor]]:
        seen = set() if _seen is None else _seen
        for name, child in self._children():
            full = f"{prefix}{name}"
            if id(child) in seen:
                continue
            seen.add(id(child))
            if isinstance(child, Tensor):
                if child.requires_grad:
                    yield full, child
            else:
                yield from child.named_parameters(prefix=full + ".", _seen=seen)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self, _seen: set | None = None) -> Iterator["Module"]:
        seen = set() if _seen is None else _seen
        if id(self) in seen:
            return
        seen.add(id(self))
        yield self
        for _, child in self._children():
            if isinstance(child, Module):
                yield from child.modules(seen)

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.data) for k, p in self.named_parameters())

    def load_state_dict(self, state: dict) -> None:
        named = dict(self.named_parameters())
        missing = set(named) - set(state)
        extra = set(state) - set(named)
        if missing or extra:
            raise ValueError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in named.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def param_count(module: Module) -> int:
    return int(sum(p.size for p in module.parameters()))


def param_report(module: Module, depth: int = 1) -> "OrderedDict[str, int]":
    """Parameter totals grouped by the first ``depth`` name components."""
    groups: OrderedDict[str, int] = OrderedDict()
    for name, p in module.named_parameters():
        key = ".".join(name.split(".")[:depth])
        groups[key] = groups.get(key, 0) + p.size
    return groups


def _uniform(rng: np.random.Generator, shape, bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(T.default_dtype())


class Linear(Module):
    def __init__(self, din: int, dout: int, rng: np.random.Generator, bias: bool = True):
        bound = 1.0 / np.sqrt(din)
        self.weight = T.parameter(_uniform(rng, (dout, din), bound))
        self.bias = T.parameter(_uniform(rng, (dout,), bound)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class Conv1d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator,
                 groups: int = 1, padding: str = "causal"):
        if cin % groups or cout % groups:
            raise ValueError("channels must divide groups")
        if padding == "same" and k % 2 == 0:
            raise ValueError("'same' padding needs an odd kernel size")
        bound = 1.0 / np.sqrt(cin // groups * k)
        self.weight = T.parameter(_uniform(rng, (cout, cin // groups, k), bound))
        self.bias = T.parameter(_uniform(rng, (cout,), bound))
        self.groups = groups
        self.padding = padding

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[-1]

    def forward(self, x: Tensor) -> Tensor:
        return T.conv1d(x, self.weight, self.bias, groups=self.groups, padding=self.padding)


class LayerNorm(Module):
    """Channel layer norm for [B, C, L]."""

    def __init__(self, channels: int, eps: float = 1e-5):
        dt = T.default_dtype()
        self.gamma = T.parameter(np.ones(channels, dtype=dt))
        self.beta = T.parameter(np.zeros(channels, dtype=dt))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm_channels(x, self.gamma, self.beta, self.eps)


class LayerScale(Module):
    """Per-channel affine ``gamma * x + beta`` on [B, C, L]."""

    def __init__(self, channels: int, init: float):
        dt = T.default_dtype()
        self.gamma = T.parameter(np.full((1, channels, 1), init, dtype=dt))
        self.beta = T.parameter(np.zeros((1, channels, 1), dtype=dt))

    def forward(self, x: Tensor) -> Tensor:
        return T.add(T.mul(x, self.gamma), self.beta)
