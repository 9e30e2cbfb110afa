"""Training loop, inference and evaluation over an annotation database."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .backbone import ModelConfig
from .data import AnnotationDB, VideoRecord, atomic_write_text, load_annotations, load_features
from .heads import ActionSegment, assign_targets, decode_segments, focal_loss, iou_reg_loss
from .metrics import EvalReport, mean_ap, nms
from .model import ActionLocalizer, save_checkpoint
from .optim import AdamW, clip_grad_norm, warmup_cosine

log = logging.getLogger(__name__)

DECAY_NAMES = ("weight", "W_B", "W_C", "W_delta")


class NumericalFailure(RuntimeError):
    pass


@dataclass
class OptimConfig:
    lr: float = 1e-3
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 50
    warmup_fraction: float = 0.05
    batch_size: int = 4
    grad_clip: float = 1.0
    loss_weight: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0


@dataclass
class InferConfig:
    score_thresh: float = 0.001
    pre_nms_topk: int = 2000
    nms_thresh: float = 0.5
    max_segments: int = 100
    min_duration: float = 0.05


@dataclass
class Sample:
    record: VideoRecord
    feats: np.ndarray  # [C, L]
    segments: list[ActionSegment]

    @property
    def length(self) -> int:
        return self.feats.shape[1]


def load_samples(db: AnnotationDB, subset: str) -> list[Sample]:
    lm = db.label_map
    out = []
    for rec in sorted(db.subset(subset), key=lambda r: r.video_id):
        out.append(Sample(rec, load_features(rec.feature_path)[0], rec.segments(lm)))
    return out


def level_lengths(L: int, cfg: ModelConfig) -> list[int]:
    return [-(-L // s) for s in cfg.level_strides()]


def batch_targets(samples: list[Sample], L: int, cfg: ModelConfig, clip_seconds: float):
    """Concatenated-over-levels targets for a padded batch.

    Returns cls [B, K, S], reg [B, 2, S], pos [B, S] and valid [B, S] with S
    the summed level lengths; ``valid`` masks padding.
    """
    lengths = level_lengths(L, cfg)
    strides = cfg.level_strides()
    ranges = cfg.ranges()
    cls, reg, pos, valid = [], [], [], []
    for smp in samples:
        ta = assign_targets(smp.segments, lengths, strides, clip_seconds, ranges, cfg.num_classes)
        cls.append(np.concatenate(ta.cls, axis=1))
        reg.append(np.concatenate(ta.reg, axis=1))
        pos.append(np.concatenate(ta.pos))
        valid.append(np.concatenate([np.arange(n) < -(-smp.length // s) for n, s in zip(lengths, strides)]))
    return np.stack(cls), np.stack(reg), np.stack(pos), np.stack(valid)


def pad_batch(samples: list[Sample]) -> tuple[np.ndarray, int]:
    L = max(s.length for s in samples)
    x = np.zeros((len(samples), samples[0].feats.shape[0], L), dtype=np.float32)
    for i, s in enumerate(samples):
        x[i, :, :s.length] = s.feats
    return x, L


def compute_loss(model: ActionLocalizer, samples: list[Sample], clip_seconds: float, opt: OptimConfig):
    x, L = pad_batch(samples)
    out = model(T.Tensor(x))
    cls_t, reg_t, pos, valid = batch_targets(samples, L, model.cfg, clip_seconds)
    logits = T.concat(out.cls_logits, axis=2)
    offsets = T.concat(out.reg_offsets, axis=2)
    npos = max(int(pos.sum()), 1)
    fl = T.mul(focal_loss(logits, cls_t, valid[:, None, :], opt.focal_alpha, opt.focal_gamma), 1.0 / npos)
    rl = iou_reg_loss(offsets, reg_t, pos & valid)
    return T.add(fl, T.mul(rl, opt.loss_weight)), float(fl.item()), float(rl.item())


def decay_mask(model: ActionLocalizer) -> list[bool]:
    return [name.rsplit(".", 1)[-1] in DECAY_NAMES for name, _ in model.named_parameters()]


def predict_video(model: ActionLocalizer, feats: np.ndarray, clip_seconds: float, duration: float,
                  icfg: InferConfig) -> list[ActionSegment]:
    with T.no_grad():
        out = model(T.Tensor(feats[None]))
    segs = decode_segments([c.data[0] for c in out.cls_logits], [r.data[0] for r in out.reg_offsets],
                           out.strides, clip_seconds, duration, icfg.score_thresh, icfg.pre_nms_topk,
                           icfg.min_duration)
    return nms(segs, icfg.nms_thresh, class_aware=True, max_keep=icfg.max_segments)


def predict(model: ActionLocalizer, samples: list[Sample], clip_seconds: float,
            icfg: InferConfig) -> dict[str, list[ActionSegment]]:
    model.eval()
    return {s.record.video_id: predict_video(model, s.feats, clip_seconds, s.record.duration, icfg)
            for s in samples}


def evaluate(model: ActionLocalizer, samples: list[Sample], db: AnnotationDB, icfg: InferConfig,
             thresholds="thumos") -> tuple[EvalReport, dict[str, list[ActionSegment]]]:
    preds = predict(model, samples, db.clip_stride_seconds, icfg)
    gts = {s.record.video_id: s.segments for s in samples}
    return mean_ap(preds, gts, thresholds, class_names=db.labels), preds


@dataclass
class TrainResult:
    model: ActionLocalizer
    history: list[dict] = field(default_factory=list)
    best_checkpoint: str | None = None
    best_val: float = -1.0


def train(model_cfg: ModelConfig, opt: OptimConfig, db: AnnotationDB, out_dir, seed: int = 0,
          icfg: InferConfig | None = None, eval_every: int = 1, thresholds="thumos",
          stop_after_epochs: int | None = None, log_fn=None) -> TrainResult:
    """Train with AdamW, linear warmup and cosine decay.

    One JSON line per epoch goes to ``out_dir/metrics.jsonl``.  The best
    validation checkpoint is kept as ``best.ckpt``; ``last.ckpt`` always
    holds the latest finite weights.  ``stop_after_epochs`` ends early
    without changing the learning-rate schedule.
    """
    icfg = icfg or InferConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    init_ss, order_ss, drop_ss = np.random.SeedSequence(seed).spawn(3)
    model = ActionLocalizer(model_cfg, rng=np.random.default_rng(init_ss))
    model.set_rng(np.random.default_rng(drop_ss))
    order_rng = np.random.default_rng(order_ss)
    train_set = load_samples(db, "train")
    val_set = load_samples(db, "val")
    if not train_set:
        raise ValueError("no training videos")
    names = [n for n, _ in model.named_parameters()]
    optim = AdamW(model.parameters(), lr=opt.lr, betas=opt.betas, eps=opt.eps, weight_decay=opt.weight_decay,
                  decay_mask=decay_mask(model), names=names)
    steps_per_epoch = math.ceil(len(train_set) / opt.batch_size)
    total = steps_per_epoch * opt.epochs
    warmup = int(round(opt.warmup_fraction * total))
    result = TrainResult(model)
    metrics_path = out / "metrics.jsonl"
    lines: list[str] = []
    nparams = model.param_count()
    step = 0
    last_epochs = opt.epochs if stop_after_epochs is None else min(opt.epochs, stop_after_epochs)
    for epoch in range(last_epochs):
        t0 = time.perf_counter()
        model.train()
        perm = order_rng.permutation(len(train_set))
        losses, fls, rls = [], [], []
        for b in range(steps_per_epoch):
            batch = [train_set[i] for i in perm[b * opt.batch_size:(b + 1) * opt.batch_size]]
            optim.lr = warmup_cosine(step, total, warmup, opt.lr)
            optim.zero_grad()
            try:
                loss, fl, rl = compute_loss(model, batch, db.clip_stride_seconds, opt)
            except FloatingPointError as exc:
                raise NumericalFailure(f"epoch {epoch} step {step}: {exc}") from exc
            if not math.isfinite(loss.item()):
                raise NumericalFailure(f"non-finite loss at epoch {epoch} step {step}")
            loss.backward()
            clip_grad_norm(optim.params, opt.grad_clip)
            try:
                optim.step()
            except FloatingPointError as exc:
                raise NumericalFailure(str(exc)) from exc
            losses.append(loss.item())
            fls.append(fl)
            rls.append(rl)
            step += 1
        rec = {"epoch": epoch, "step": step, "train_loss": float(np.mean(losses)),
               "focal_loss": float(np.mean(fls)), "reg_loss": float(np.mean(rls)),
               "lr": optim.lr, "param_count": nparams, "seed": seed}
        save_checkpoint(out / "last.ckpt", model, {"epoch": epoch, "seed": seed})
        if val_set and eval_every and ((epoch + 1) % eval_every == 0 or epoch + 1 == last_epochs):
            report, _ = evaluate(model, val_set, db, icfg, thresholds)
            rec["val_mAP"] = dict(zip(report.columns(), report.row()))
            score = report.average_mAP
            if score > result.best_val:
                result.best_val = score
                save_checkpoint(out / "best.ckpt", model, {"epoch": epoch, "seed": seed, "val_avg_mAP": score})
                result.best_checkpoint = str(out / "best.ckpt")
        rec["seconds"] = round(time.perf_counter() - t0, 3)
        result.history.append(rec)
        lines.append(json.dumps(rec, sort_keys=True))
        atomic_write_text(metrics_path, "\n".join(lines) + "\n")
        if log_fn is not None:
            log_fn(rec)
        log.debug("epoch %d loss %.4f", epoch, rec["train_loss"])
    if result.best_checkpoint is None:
        save_checkpoint(out / "best.ckpt", model, {"epoch": last_epochs - 1, "seed": seed})
        result.best_checkpoint = str(out / "best.ckpt")
    return result


def run_config_dict(model_cfg: ModelConfig, opt: OptimConfig, icfg: InferConfig) -> dict:
    return {"model": model_cfg.to_dict(), "optim": asdict(opt), "infer": asdict(icfg)}


__all__ = [
    "OptimConfig", "InferConfig", "Sample", "load_samples", "compute_loss", "predict", "predict_video",
    "evaluate", "train", "TrainResult", "NumericalFailure", "load_annotations",
]
