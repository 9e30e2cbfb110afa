"""Embedding, recurrent Stem, Branch pyramid and Neck."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .blocks import BiS6Block, BlockConfig
from .nn import Conv1d, LayerNorm, LayerScale, Module
from .tensor import Tensor


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    Defaults are the reference configuration: dual stem, one block per
    module, TFA kernels (2, 3, 4), CFA kernels (2, 4, 8), sum aggregation and
    sixteen recurrent stem passes.
    """

    c_in: int = 32
    c_emb: int = 64
    num_classes: int = 3
    state_dim: int = 16
    b_e: int = 1
    b_s: int = 1
    b_b: int = 1
    r: int = 16
    structure: str = "dual"
    k_tfa: tuple[int, ...] = (2, 3, 4)
    k_cfa: tuple[int, ...] = (2, 4, 8)
    k_branch: tuple[int, ...] = (4,)
    aggregate: str = "sum"
    pooled_len: int = 64
    pyramid_depth: int = 5
    include_base_level: bool = True
    drop_path_rate: float = 0.1
    layer_scale_init: float = 1e-4
    share_directions: bool = False
    use_skip: bool = True
    cfa_input: str = "tfa_output"
    cfa_scan_axis: str = "channel"
    recurrent_skip: str = "chained"
    scan_impl: str = "sequential"
    scan_chunk: int = 64
    head_layers: int = 2
    prior_prob: float = 0.01
    regression_ranges: tuple[tuple[float, float], ...] | None = None

    def __post_init__(self):
        self.k_tfa = tuple(int(k) for k in self.k_tfa)
        self.k_cfa = tuple(int(k) for k in self.k_cfa)
        self.k_branch = tuple(int(k) for k in self.k_branch)
        if self.regression_ranges is not None:
            self.regression_ranges = tuple((float(lo), float(hi)) for lo, hi in self.regression_ranges)
        if self.r < 1:
            raise ValueError("r must be >= 1")
        if self.b_e < 1 or self.b_b < 1 or self.b_s < 0:
            raise ValueError("need b_e >= 1, b_b >= 1, b_s >= 0")
        if self.pyramid_depth < 1:
            raise ValueError("pyramid_depth must be >= 1")
        if min(self.c_in, self.c_emb, self.num_classes, self.state_dim, self.pooled_len) < 1:
            raise ValueError("widths must be positive")
        if self.structure not in ("single", "dual"):
            raise ValueError(f"unknown structure {self.structure!r}")
        if self.cfa_input not in ("tfa_output", "block_input"):
            raise ValueError(f"unknown cfa_input {self.cfa_input!r}")
        if self.recurrent_skip not in ("chained", "dense"):
            raise ValueError(f"unknown recurrent_skip {self.recurrent_skip!r}")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ValueError("drop_path_rate must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = [list(e) if isinstance(e, tuple) else e for e in v]
        if d["regression_ranges"] is not None:
            d["regression_ranges"] = [[lo, hi if np.isfinite(hi) else "inf"] for lo, hi in d["regression_ranges"]]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config fields: {sorted(unknown)}")
        d = dict(d)
        if d.get("regression_ranges") is not None:
            d["regression_ranges"] = tuple((float(lo), float(hi)) for lo, hi in d["regression_ranges"])
        return cls(**d)

    @property
    def num_levels(self) -> int:
        return self.pyramid_depth + (1 if self.include_base_level else 0)

    def level_strides(self) -> list[int]:
        first = 0 if self.include_base_level else 1
        return [2 ** d for d in range(first, self.pyramid_depth + 1)]

    def ranges(self) -> list[tuple[float, float]]:
        """Regression ranges per level, in base clip units."""
        if self.regression_ranges is not None:
            if len(self.regression_ranges) != self.num_levels:
                raise ValueError("need one regression range per pyramid level")
            return list(self.regression_ranges)
        bounds = [0.0] + [4.0 * 2 ** i for i in range(self.num_levels - 1)] + [float("inf")]
        return list(zip(bounds[:-1], bounds[1:]))

    def block_config(self, kind: str) -> BlockConfig:
        common = dict(state_dim=self.state_dim, share_directions=self.share_directions, use_skip=self.use_skip,
                      scan_impl=self.scan_impl, scan_chunk=self.scan_chunk)
        if kind == "tfa":
            return BlockConfig(self.c_emb, self.k_tfa, "time", self.aggregate, **common)
        if kind == "cfa":
            return BlockConfig(self.c_emb, self.k_cfa, "channel", self.aggregate, pooled_len=self.pooled_len,
                               cfa_scan_axis=self.cfa_scan_axis, **common)
        if kind == "branch":
            return BlockConfig(self.c_emb, self.k_branch, "time", "sum", **common)
        raise ValueError(kind)

    def drop_rates(self) -> list[float]:
        """Linearly increasing drop-path rates over stem then branch blocks."""
        n = self.b_s + self.pyramid_depth * self.b_b
        if n <= 1:
            return [self.drop_path_rate] * n
        return [self.drop_path_rate * i / (n - 1) for i in range(n)]


@dataclass
class FeaturePyramid:
    levels: list[Tensor] = field(default_factory=list)
    strides: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.levels)

    @property
    def lengths(self) -> list[int]:
        return [t.shape[-1] for t in self.levels]


class _DropPath(Module):
    """Base for modules whose residual branch uses drop path."""

    _rng: np.random.Generator | None = None
    drop_rate: float = 0.0

    def _drop(self, x: Tensor) -> Tensor:
        return T.drop_path(x, self.drop_rate, self.training, self._rng)


class Embedding(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.convs = [Conv1d(cfg.c_in, cfg.c_emb, 3, rng, padding="same")]
        self.norms = [LayerNorm(cfg.c_emb)]
        for _ in range(cfg.b_e):
            self.convs.append(Conv1d(cfg.c_emb, cfg.c_emb, 3, rng, padding="same"))
            self.norms.append(LayerNorm(cfg.c_emb))
        self.c_in = cfg.c_in

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.c_in:
            raise ValueError(f"embedding expects {self.c_in} input channels, got {x.shape[1]}")
        for conv, norm in zip(self.convs, self.norms):
            x = T.relu(norm(conv(x)))
        return x


class StemBlock(_DropPath):
    """LN(u + drop_path(scale(m(u)))) with m the TFA output, gated by CFA in dual mode."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, drop_rate: float):
        self.tfa = BiS6Block(cfg.block_config("tfa"), rng)
        self.cfa = BiS6Block(cfg.block_config("cfa"), rng) if cfg.structure == "dual" else None
        self.scale = LayerScale(cfg.c_emb, cfg.layer_scale_init)
        self.norm = LayerNorm(cfg.c_emb)
        self.cfa_input = cfg.cfa_input
        self.drop_rate = drop_rate

    def mix(self, u: Tensor) -> Tensor:
        t = self.tfa(u)
        if self.cfa is None:
            return t
        src = t if self.cfa_input == "tfa_output" else u
        gate = T.sigmoid(self.cfa(src))  # [B, C, 1]
        return T.mul(t, gate)

    def forward(self, u: Tensor) -> Tensor:
        return self.norm(T.add(u, self._drop(self.scale(self.mix(u)))))


class Stem(Module):
    """B_s stem blocks applied r times with the same weights."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        rates = cfg.drop_rates()[:cfg.b_s]
        self.blocks = [StemBlock(cfg, rng, rate) for rate in rates]
        self.r = cfg.r
        self.recurrent_skip = cfg.recurrent_skip

    def forward(self, u: Tensor) -> Tensor:
        if not self.blocks:
            return u
        u0 = u
        for i in range(self.r):
            if i > 0 and self.recurrent_skip == "dense":
                u = T.add(u, u0)
            for blk in self.blocks:
                u = blk(u)
        return u


class BranchBlock(_DropPath):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, drop_rate: float):
        self.block = BiS6Block(cfg.block_config("branch"), rng)
        self.scale = LayerScale(cfg.c_emb, cfg.layer_scale_init)
        self.drop_rate = drop_rate

    def forward(self, x: Tensor) -> Tensor:
        return T.add(x, self._drop(self.scale(self.block(x))))


class BranchLevel(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, rates: list[float]):
        self.blocks = [BranchBlock(cfg, rng, rate) for rate in rates]
        self.norm = LayerNorm(cfg.c_emb)

    def forward(self, x: Tensor) -> Tensor:
        for blk in self.blocks:
            x = blk(x)
        return T.max_pool_k3s2p1(self.norm(x))


class Branch(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        rates = cfg.drop_rates()[cfg.b_s:]
        self.levels = [BranchLevel(cfg, rng, rates[d * cfg.b_b:(d + 1) * cfg.b_b]) for d in range(cfg.pyramid_depth)]
        self.include_base_level = cfg.include_base_level

    def forward(self, z: Tensor) -> FeaturePyramid:
        depth = len(self.levels)
        if z.shape[-1] < 2 ** depth:
            raise ValueError(f"sequence length {z.shape[-1]} too short for pyramid depth {depth}")
        pyr = FeaturePyramid()
        if self.include_base_level:
            pyr.levels.append(z)
            pyr.strides.append(1)
        x = z
        for d, level in enumerate(self.levels, start=1):
            x = level(x)
            pyr.levels.append(x)
            pyr.strides.append(2 ** d)
        return pyr


class Neck(Module):
    def __init__(self, cfg: ModelConfig):
        self.norms = [LayerNorm(cfg.c_emb) for _ in range(cfg.num_levels)]

    def forward(self, p: FeaturePyramid) -> FeaturePyramid:
        return FeaturePyramid([n(x) for n, x in zip(self.norms, p.levels)], list(p.strides))


class Backbone(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.embed = Embedding(cfg, rng)
        self.stem = Stem(cfg, rng)
        self.branch = Branch(cfg, rng)

    def forward(self, x: Tensor) -> FeaturePyramid:
        return self.branch(self.stem(self.embed(x)))


def embed(x: Tensor, module: Embedding) -> Tensor:
    return module(x)


def stem_recurrent(z: Tensor, module: Stem) -> Tensor:
    return module(z)


def branch_pyramid(z: Tensor, module: Branch) -> FeaturePyramid:
    return module(z)


def neck_normalize(p: FeaturePyramid, module: Neck) -> FeaturePyramid:
    return module(p)
