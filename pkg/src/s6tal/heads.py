"""Classification / boundary-regression heads, targets, losses and decoding.

Regression outputs are distances from a timestep's center to the segment
start and end, measured in units of the level stride.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import FeaturePyramid, ModelConfig
from .nn import Conv1d, LayerNorm, Module
from .tensor import Tensor

MIN_DURATION = 0.05


@dataclass(frozen=True)
class ActionSegment:
    start: float
    end: float
    label: int
    score: float = 1.0


@dataclass
class HeadOutputs:
    cls_logits: list[Tensor]  # per level [B, K, L_d]
    reg_offsets: list[Tensor]  # per level [B, 2, L_d], non-negative
    strides: list[int]


@dataclass
class TargetAssignment:
    cls: list[np.ndarray]  # per level [K, L_d] one-hot (all zero for background)
    reg: list[np.ndarray]  # per level [2, L_d] in stride units
    pos: list[np.ndarray]  # per level [L_d] bool


class Tower(Module):
    def __init__(self, channels: int, out_channels: int, layers: int, rng: np.random.Generator):
        self.convs = [Conv1d(channels, channels, 3, rng, padding="same") for _ in range(layers)]
        self.norms = [LayerNorm(channels) for _ in range(layers)]
        self.out = Conv1d(channels, out_channels, 3, rng, padding="same")

    def forward(self, x: Tensor) -> Tensor:
        for conv, norm in zip(self.convs, self.norms):
            x = T.relu(norm(conv(x)))
        return self.out(x)


class Heads(Module):
    """Classification and regression towers shared across all pyramid levels."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cls_tower = Tower(cfg.c_emb, cfg.num_classes, cfg.head_layers, rng)
        self.reg_tower = Tower(cfg.c_emb, 2, cfg.head_layers, rng)
        prior = -np.log((1 - cfg.prior_prob) / cfg.prior_prob)
        self.cls_tower.out.bias.data[:] = prior

    def forward(self, p: FeaturePyramid) -> HeadOutputs:
        cls = [self.cls_tower(x) for x in p.levels]
        reg = [T.softplus(self.reg_tower(x)) for x in p.levels]
        return HeadOutputs(cls, reg, list(p.strides))


def head_forward(p: FeaturePyramid, heads: Heads) -> HeadOutputs:
    return heads(p)


# ---------------------------------------------------------------------------
# targets
# ---------------------------------------------------------------------------


def assign_targets(gts, lengths: list[int], strides: list[int], clip_seconds: float,
                   ranges: list[tuple[float, float]], num_classes: int) -> TargetAssignment:
    """Label every pyramid timestep against ground-truth segments.

    Timestep t at stride s sits at time (t + 0.5) s clip_seconds.  It is
    positive for a segment containing that time (closed interval) whose larger
    center-to-boundary distance, in base clip units, falls in the level's
    range.  Among several candidates the shortest segment wins.
    """
    if not ranges or len(ranges) != len(lengths):
        raise ValueError("need one regression range per level")
    gts = list(gts)
    starts = np.array([g.start for g in gts], dtype=np.float64)
    ends = np.array([g.end for g in gts], dtype=np.float64)
    labels = np.array([g.label for g in gts], dtype=np.int64)
    out = TargetAssignment([], [], [])
    for L, s, (lo, hi) in zip(lengths, strides, ranges):
        cls = np.zeros((num_classes, L), dtype=np.float32)
        reg = np.zeros((2, L), dtype=np.float32)
        pos = np.zeros(L, dtype=bool)
        if gts:
            unit = s * clip_seconds
            tau = (np.arange(L) + 0.5) * unit
            left = tau[:, None] - starts[None, :]  # [L, G]
            right = ends[None, :] - tau[:, None]
            inside = (left >= 0) & (right >= 0)
            reach = np.maximum(left, right) / clip_seconds
            ok = inside & (reach >= lo) & (reach < hi)
            seg_len = np.where(ok, (ends - starts)[None, :], np.inf)
            best = seg_len.argmin(axis=1)
            pos = np.isfinite(seg_len[np.arange(L), best])
            idx = np.nonzero(pos)[0]
            g = best[idx]
            cls[labels[g], idx] = 1.0
            reg[0, idx] = left[idx, g] / unit
            reg[1, idx] = right[idx, g] / unit
        out.cls.append(cls)
        out.reg.append(reg)
        out.pos.append(pos)
    return out


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def focal_loss(logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None,
               alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Sigmoid focal loss summed over every (masked) element.

    ``alpha < 0`` disables the class-balance weight.  Normalization is left
    to the caller.
    """
    x = logits.data
    y = np.asarray(targets, dtype=x.dtype)
    p = T._sigmoid_np(x)
    log_p = -T._softplus_np(-x)
    log_1mp = -T._softplus_np(x)
    if alpha >= 0:
        at = alpha * y + (1 - alpha) * (1 - y)
    else:
        at = np.ones_like(y)
    m = np.ones_like(x) if mask is None else np.broadcast_to(np.asarray(mask, dtype=x.dtype), x.shape)
    # binary targets: y=1 -> -(1-p)^g log p ; y=0 -> -p^g log(1-p)
    pos_term = -((1 - p) ** gamma) * log_p
    neg_term = -(p ** gamma) * log_1mp
    loss = at * (y * pos_term + (1 - y) * neg_term) * m
    total = np.asarray(loss.sum(), dtype=x.dtype)

    def bw(g):
        d_pos = (1 - p) ** gamma * (gamma * p * log_p - (1 - p))
        d_neg = p ** gamma * (p - gamma * (1 - p) * log_1mp)
        return (g * at * (y * d_pos + (1 - y) * d_neg) * m,)

    return T.make_op(total, (logits,), bw, "focal_loss")


def iou_reg_loss(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean of 1 - IoU over positive timesteps; zero when there are none.

    ``pred`` and ``target`` are [..., 2, L] distance pairs sharing an anchor,
    so the two intervals always overlap at the anchor.
    """
    pd = pred.data
    tg = np.asarray(target, dtype=pd.dtype)
    m = np.asarray(mask, dtype=bool)
    npos = int(m.sum())
    if npos == 0:
        return T.make_op(np.zeros((), dtype=pd.dtype), (pred,), lambda g: (np.zeros_like(pd),), "iou_loss")
    ps, pe = pd[..., 0, :], pd[..., 1, :]
    ts, te = tg[..., 0, :], tg[..., 1, :]
    inter = np.minimum(ps, ts) + np.minimum(pe, te)
    union = ps + pe + ts + te - inter
    union = np.maximum(union, 1e-8)
    iou = inter / union
    total = np.asarray(((1 - iou) * m).sum() / npos, dtype=pd.dtype)

    def bw(g):
        di_s = (ps < ts).astype(pd.dtype)
        di_e = (pe < te).astype(pd.dtype)
        # dU = 1 - dI for each predicted distance
        dl_s = -((di_s * union - inter * (1 - di_s)) / union ** 2)
        dl_e = -((di_e * union - inter * (1 - di_e)) / union ** 2)
        grad = np.stack([dl_s, dl_e], axis=-2) * m[..., None, :] * (g / npos)
        return (grad.astype(pd.dtype),)

    return T.make_op(total, (pred,), bw, "iou_loss")


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------


def decode_segments(cls_logits: list[np.ndarray], reg_offsets: list[np.ndarray], strides: list[int],
                    clip_seconds: float, duration: float, score_thresh: float = 0.001,
                    pre_nms_topk: int = 2000, min_duration: float = MIN_DURATION) -> list[ActionSegment]:
    """Turn one video's head outputs ([K, L_d] logits, [2, L_d] offsets per level) into segments."""
    segs: list[ActionSegment] = []
    for logits, reg, s in zip(cls_logits, reg_offsets, strides):
        scores = T._sigmoid_np(np.asarray(logits, dtype=np.float64))
        k_idx, t_idx = np.nonzero(scores >= score_thresh)
        if k_idx.size == 0:
            continue
        sc = scores[k_idx, t_idx]
        order = np.lexsort((k_idx, t_idx, -sc))[:pre_nms_topk]
        k_idx, t_idx, sc = k_idx[order], t_idx[order], sc[order]
        unit = s * clip_seconds
        center = t_idx + 0.5
        start = np.clip((center - reg[0, t_idx]) * unit, 0.0, duration)
        end = np.clip((center + reg[1, t_idx]) * unit, 0.0, duration)
        keep = (end - start) >= min_duration
        segs.extend(ActionSegment(float(a), float(b), int(k), float(c))
                    for a, b, k, c in zip(start[keep], end[keep], k_idx[keep], sc[keep]))
    return segs
