"""Temporal IoU, NMS and detection mAP."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .heads import ActionSegment

PRESETS = {
    "thumos": (0.3, 0.4, 0.5, 0.6, 0.7),
    "activitynet": (0.5, 0.75, 0.95),
}


def tiou(a: tuple[float, float], b: tuple[float, float]) -> float:
    a0, a1 = a
    b0, b1 = b
    if a1 < a0 or b1 < b0:
        raise ValueError(f"inverted interval: {a}, {b}")
    inter = max(0.0, min(a1, b1) - max(a0, b0))
    union = (a1 - a0) + (b1 - b0) - inter
    return inter / union if union > 0 else 0.0


def tiou_matrix(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Pairwise tIoU between [P, 2] and [G, 2] interval arrays."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 2)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    inter = np.clip(np.minimum(pred[:, None, 1], gt[None, :, 1]) - np.maximum(pred[:, None, 0], gt[None, :, 0]),
                    0.0, None)
    union = (pred[:, 1] - pred[:, 0])[:, None] + (gt[:, 1] - gt[:, 0])[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def _canonical_order(segs: list[ActionSegment]) -> list[ActionSegment]:
    return sorted(segs, key=lambda s: (-s.score, s.start, s.label, s.end))


def nms(segs: list[ActionSegment], thr: float, class_aware: bool = True,
        max_keep: int | None = None) -> list[ActionSegment]:
    """Greedy suppression of segments overlapping a kept one by tIoU > thr."""
    order = _canonical_order(segs)
    kept: list[ActionSegment] = []
    for s in order:
        if any((not class_aware or k.label == s.label) and tiou((k.start, k.end), (s.start, s.end)) > thr
               for k in kept):
            continue
        kept.append(s)
        if max_keep is not None and len(kept) >= max_keep:
            break
    return kept


def average_precision(preds: list[tuple[str, ActionSegment]], gts: list[tuple[str, ActionSegment]],
                      thr: float) -> float:
    """AP for one class.

    ``preds`` and ``gts`` pair a video id with a segment.  Predictions are
    matched greedily in descending score order to the unmatched ground truth
    of highest tIoU in the same video; AP integrates the monotone precision
    envelope over every recall step.
    """
    if not gts:
        raise ValueError("average_precision needs at least one ground-truth segment")
    order = sorted(range(len(preds)), key=lambda i: (-preds[i][1].score, preds[i][1].start, i))
    by_video: dict[str, list[int]] = {}
    for j, (vid, _) in enumerate(gts):
        by_video.setdefault(vid, []).append(j)
    matched = np.zeros(len(gts), dtype=bool)
    tp = np.zeros(len(order))
    for rank, i in enumerate(order):
        vid, p = preds[i]
        best, best_iou = -1, -1.0
        for j in by_video.get(vid, ()):
            if matched[j]:
                continue
            g = gts[j][1]
            v = tiou((p.start, p.end), (g.start, g.end))
            if v >= thr and v > best_iou:
                best, best_iou = j, v
        if best >= 0:
            matched[best] = True
            tp[rank] = 1
    return ap_from_tp(tp, len(gts))


def ap_from_tp(tp: np.ndarray, n_gt: int) -> float:
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0] + 1
    return float(np.sum((mrec[idx] - mrec[idx - 1]) * mpre[idx]))


@dataclass
class EvalReport:
    thresholds: list[float]
    class_names: list[str]
    ap: dict[str, list[float]] = field(default_factory=dict)  # class -> AP per threshold
    mAP: list[float] = field(default_factory=list)
    num_predictions: int = 0
    num_ground_truth: int = 0

    @property
    def average_mAP(self) -> float:
        return float(np.mean(self.mAP)) if self.mAP else 0.0

    def columns(self) -> list[str]:
        return [f"@{t:g}" for t in self.thresholds] + ["Avg"]

    def row(self) -> list[float]:
        return list(self.mAP) + [self.average_mAP]

    def to_dict(self) -> dict:
        return {
            "thresholds": list(self.thresholds),
            "columns": self.columns(),
            "mAP": {c: v for c, v in zip(self.columns(), self.row())},
            "per_class_ap": self.ap,
            "num_predictions": self.num_predictions,
            "num_ground_truth": self.num_ground_truth,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table(self) -> str:
        cols = ["", *self.columns()]
        rows = [["mAP (%)", *[f"{100 * v:.1f}" for v in self.row()]]]
        for name in self.class_names:
            if name in self.ap:
                vals = self.ap[name]
                rows.append([name, *[f"{100 * v:.1f}" for v in vals], f"{100 * float(np.mean(vals)):.1f}"])
        widths = [max(len(str(r[i])) for r in [cols, *rows]) for i in range(len(cols))]
        fmt = lambda r: "  ".join(str(v).rjust(w) for v, w in zip(r, widths))  # noqa: E731
        lines = [fmt(cols), "  ".join("-" * w for w in widths)] + [fmt(r) for r in rows]
        return "\n".join(lines)


def resolve_thresholds(preset) -> tuple[float, ...]:
    if isinstance(preset, str):
        try:
            return PRESETS[preset]
        except KeyError:
            raise ValueError(f"unknown threshold preset {preset!r}") from None
    vals = tuple(float(t) for t in preset)
    if not vals or any(not 0 < t <= 1 for t in vals):
        raise ValueError(f"thresholds must lie in (0, 1], got {vals}")
    return vals


def mean_ap(preds: dict[str, list[ActionSegment]], gts: dict[str, list[ActionSegment]],
            thresholds="thumos", class_names: list[str] | None = None) -> EvalReport:
    """mAP per threshold over classes that have at least one ground-truth segment."""
    thr = resolve_thresholds(thresholds)
    gt_items = [(vid, g) for vid, segs in gts.items() for g in segs]
    if not gt_items:
        raise ValueError("empty ground-truth database")
    pred_items = [(vid, p) for vid, segs in preds.items() for p in segs]
    labels = sorted({g.label for _, g in gt_items})
    names = class_names or [str(i) for i in range(max(labels) + 1)]
    report = EvalReport(thresholds=list(thr), class_names=list(names),
                        num_predictions=len(pred_items), num_ground_truth=len(gt_items))
    per_thr = np.zeros((len(labels), len(thr)))
    for ci, c in enumerate(labels):
        cg = [item for item in gt_items if item[1].label == c]
        cp = [item for item in pred_items if item[1].label == c]
        per_thr[ci] = [average_precision(cp, cg, t) for t in thr]
        report.ap[names[c]] = per_thr[ci].tolist()
    report.mAP = per_thr.mean(axis=0).tolist()
    return report
