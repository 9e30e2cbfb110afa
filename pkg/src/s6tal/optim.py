"""AdamW, gradient clipping and the warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class OptimizerState:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.05
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


class AdamW:
    """Adam with decoupled weight decay.

    ``decay_mask`` selects which parameters receive weight decay; by default
    every parameter does.
    """

    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, decay_mask: list[bool] | None = None,
                 names: list[str] | None = None):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = list(params)
        self.names = names or [f"param{i}" for i in range(len(self.params))]
        self.decay_mask = decay_mask or [True] * len(self.params)
        self.state = OptimizerState(lr=lr, betas=tuple(betas), eps=eps, weight_decay=weight_decay,
                                    m=[np.zeros_like(p.data) for p in self.params],
                                    v=[np.zeros_like(p.data) for p in self.params])

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = value

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        st = self.state
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        for name, g in zip(self.names, grads):
            if not np.isfinite(g).all():
                raise FloatingPointError(f"non-finite gradient for {name}")
        st.step += 1
        b1, b2 = st.betas
        c1 = 1.0 - b1 ** st.step
        c2 = 1.0 - b2 ** st.step
        for i, (p, g) in enumerate(zip(self.params, grads)):
            m, v = st.m[i], st.v[i]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if st.weight_decay and self.decay_mask[i]:
                p.data -= st.lr * st.weight_decay * p.data
            p.data -= (st.lr * (m / c1) / (np.sqrt(v / c2) + st.eps)).astype(p.dtype, copy=False)


def adamw_step(params: list[Tensor], grads: list[np.ndarray], state: OptimizerState) -> OptimizerState:
    """Functional single step; ``state.m``/``state.v`` are created on first use."""
    opt = AdamW(params, lr=state.lr, betas=state.betas, eps=state.eps, weight_decay=state.weight_decay)
    if state.m:
        opt.state.m, opt.state.v = state.m, state.v
    opt.state.step = state.step
    for p, g in zip(params, grads):
        p.grad = np.asarray(g, dtype=p.dtype)
    opt.step()
    return opt.state


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params if p.grad is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return total


def warmup_cosine(step: int, total_steps: int, warmup_steps: int, base_lr: float, min_ratio: float = 0.0) -> float:
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return base_lr * (min_ratio + (1 - min_ratio) * 0.5 * (1 + math.cos(math.pi * progress)))
