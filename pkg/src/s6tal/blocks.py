"""Feature-aggregated bidirectional S6 blocks.

One :class:`BiS6Block` implements the shared pipeline: project to two
halves, flip the second half in sequence order, run each half through a
multi-kernel depthwise conv stack, SiLU, an S6 layer and a SiLU gate, flip
back, concatenate and project out.  The time-axis (TFA), channel-axis (CFA)
and single-kernel branch (T-Bi-S6) variants differ only in which axis is
treated as the sequence and which kernel set is used.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Conv1d, Linear, Module
from .s6 import S6Parameters, s6_forward
from .tensor import Tensor


@dataclass
class BlockConfig:
    channels: int
    kernels: tuple[int, ...] = (2, 3, 4)
    axis: str = "time"  # "time" or "channel"
    aggregate: str = "sum"  # "sum" or "concat"
    pooled_len: int = 64  # sequence-to-feature pooling target for the channel axis
    state_dim: int = 16
    share_directions: bool = False
    use_skip: bool = True
    cfa_scan_axis: str = "channel"  # channel-axis blocks: "channel" or "time"
    scan_impl: str = "sequential"
    scan_chunk: int = 64

    def __post_init__(self):
        self.kernels = tuple(int(k) for k in self.kernels)
        if not self.kernels:
            raise ValueError("kernel list must be non-empty")
        if any(k < 1 for k in self.kernels):
            raise ValueError(f"kernel sizes must be >= 1, got {self.kernels}")
        if self.aggregate not in ("sum", "concat"):
            raise ValueError(f"unknown aggregate mode {self.aggregate!r}")
        if self.axis not in ("time", "channel"):
            raise ValueError(f"unknown axis {self.axis!r}")
        if self.cfa_scan_axis not in ("channel", "time"):
            raise ValueError(f"unknown cfa_scan_axis {self.cfa_scan_axis!r}")
        if self.axis == "channel" and self.pooled_len < max(self.kernels):
            raise ValueError("pooled length must be at least the largest kernel")

    @property
    def width(self) -> int:
        """Feature width seen by the in/out projections."""
        if self.axis == "channel" and self.cfa_scan_axis == "channel":
            return self.pooled_len
        return self.channels


class DirectionBundle(Module):
    """Conv stack and S6 layer for one scan direction."""

    def __init__(self, width: int, cfg: BlockConfig, rng: np.random.Generator):
        self.convs = [Conv1d(width, width, k, rng, groups=width, padding="causal") for k in cfg.kernels]
        inner = width * (len(cfg.kernels) if cfg.aggregate == "concat" else 1)
        self.s6 = S6Parameters(inner, cfg.state_dim, rng, use_skip=cfg.use_skip)
        self.aggregate = cfg.aggregate


def multi_kernel_aggregate(u: Tensor, convs: list[Conv1d], mode: str) -> Tensor:
    """Run each depthwise causal conv on u [B, S, F], combine, apply SiLU.

    ``sum`` keeps the width; ``concat`` stacks the outputs along features.
    """
    if not convs:
        raise ValueError("empty kernel list")
    uc = T.transpose_cl(u)
    outs = [c(uc) for c in convs]
    if mode == "sum":
        agg = outs[0]
        for o in outs[1:]:
            agg = T.add(agg, o)
    elif mode == "concat":
        agg = T.concat(outs, axis=1)
    else:
        raise ValueError(f"unknown aggregate mode {mode!r}")
    return T.silu(T.transpose_cl(agg))


class BiS6Block(Module):
    def __init__(self, cfg: BlockConfig, rng: np.random.Generator):
        self.cfg = cfg
        w = cfg.width
        self.in_proj = Linear(w, 2 * w, rng)
        self.fwd = DirectionBundle(w, cfg, rng)
        self.bwd = self.fwd if cfg.share_directions else DirectionBundle(w, cfg, rng)
        factor = len(cfg.kernels) if cfg.aggregate == "concat" else 1
        self.out_proj = Linear(2 * w * factor, w, rng)

    def _direction(self, u: Tensor, bundle: DirectionBundle) -> Tensor:
        agg = multi_kernel_aggregate(u, bundle.convs, self.cfg.aggregate)
        y = s6_forward(agg, bundle.s6, impl=self.cfg.scan_impl, chunk=self.cfg.scan_chunk)
        gate = T.silu(u)
        if self.cfg.aggregate == "concat" and len(bundle.convs) > 1:
            gate = T.concat([gate] * len(bundle.convs), axis=2)
        return T.mul(y, gate)

    def forward_sequence(self, u: Tensor) -> Tensor:
        """u [B, S, F] with S the scanned axis -> [B, S, F]."""
        xz = self.in_proj(u)
        a, b = T.chunk2_channels(xz, axis=2)
        ya = self._direction(a, self.fwd)
        yb = T.flip(self._direction(T.flip(b, 1), self.bwd), 1)
        return self.out_proj(T.concat([ya, yb], axis=2))

    def forward(self, z: Tensor) -> Tensor:
        if self.cfg.axis == "time":
            return fa_bis6_forward(z, self)
        return cfa_bis6_forward(z, self)


def fa_bis6_forward(z: Tensor, block: BiS6Block) -> Tensor:
    """Time-axis block: [B, C, L] -> [B, C, L]."""
    if z.shape[1] != block.cfg.channels:
        raise ValueError(f"expected {block.cfg.channels} channels, got {z.shape[1]}")
    return T.transpose_cl(block.forward_sequence(T.transpose_cl(z)))


def cfa_bis6_forward(z: Tensor, block: BiS6Block) -> Tensor:
    """Channel-axis block: [B, C, L] -> [B, C, 1].

    Time is pooled to ``pooled_len`` bins.  By default the channel axis is the
    scanned sequence and the pooled bins are the features.
    """
    cfg = block.cfg
    if z.shape[1] != cfg.channels:
        raise ValueError(f"expected {cfg.channels} channels, got {z.shape[1]}")
    pooled = T.adaptive_avg_pool(z, cfg.pooled_len)  # [B, C, La]
    if cfg.cfa_scan_axis == "channel":
        out = block.forward_sequence(pooled)  # sequence = C, features = La
    else:
        out = T.transpose_cl(block.forward_sequence(T.transpose_cl(pooled)))
    return T.mean_all(out)


def tfa_config(channels: int, kernels=(2, 3, 4), **kw) -> BlockConfig:
    return BlockConfig(channels=channels, kernels=tuple(kernels), axis="time", **kw)


def cfa_config(channels: int, kernels=(2, 4, 8), pooled_len: int = 64, **kw) -> BlockConfig:
    return BlockConfig(channels=channels, kernels=tuple(kernels), axis="channel", pooled_len=pooled_len, **kw)


def t_bis6_config(channels: int, **kw) -> BlockConfig:
    """Single-kernel branch block."""
    kw.pop("kernels", None)
    kw.pop("aggregate", None)
    return BlockConfig(channels=channels, kernels=(4,), axis="time", aggregate="sum", **kw)


__all__ = [
    "BlockConfig",
    "BiS6Block",
    "DirectionBundle",
    "multi_kernel_aggregate",
    "fa_bis6_forward",
    "cfa_bis6_forward",
    "tfa_config",
    "cfa_config",
    "t_bis6_config",
]
