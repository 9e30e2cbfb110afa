"""Full localizer: backbone, neck and heads, plus the checkpoint file format.

Checkpoint layout::

    bytes 0-3   magic b"S6CK"
    u32         format version (1)
    u64         header length H
    H bytes     UTF-8 JSON {"config": ModelConfig, "manifest": [...], "meta": {...}}
    blob        little-endian f32 parameters in manifest order

Each manifest entry is ``{"name", "shape", "offset", "count"}`` with
``offset`` in bytes from the start of the blob.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from . import tensor as T
from .backbone import Backbone, FeaturePyramid, ModelConfig, Neck
from .data import FormatError, atomic_write
from .heads import HeadOutputs, Heads
from .nn import Module, param_count, param_report
from .tensor import Tensor

CKPT_MAGIC = b"S6CK"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sIQ")


class ActionLocalizer(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(seed)
        self.cfg = cfg
        self.backbone = Backbone(cfg, rng)
        self.neck = Neck(cfg)
        self.heads = Heads(cfg, rng)

    def set_rng(self, rng: np.random.Generator | None) -> None:
        """Generator used by drop path during training."""
        for m in self.modules():
            if hasattr(m, "drop_rate"):
                m._rng = rng

    def features(self, x: Tensor) -> FeaturePyramid:
        return self.neck(self.backbone(x))

    def forward(self, x: Tensor) -> HeadOutputs:
        return self.heads(self.features(x))

    def param_count(self) -> int:
        return param_count(self)

    def param_report(self, depth: int = 2) -> dict[str, int]:
        return dict(param_report(self, depth))


def _manifest(model: Module):
    entries, offset = [], 0
    for name, p in model.named_parameters():
        count = int(p.size)
        entries.append({"name": name, "shape": list(p.shape), "offset": offset, "count": count})
        offset += 4 * count
    return entries, offset


def save_checkpoint(path, model: ActionLocalizer, meta: dict | None = None) -> None:
    manifest, nbytes = _manifest(model)
    header = json.dumps({"config": model.cfg.to_dict(), "manifest": manifest, "meta": meta or {}},
                        sort_keys=True).encode("utf-8")
    blob = b"".join(np.ascontiguousarray(p.data, dtype="<f4").tobytes() for p in model.parameters())
    assert len(blob) == nbytes
    atomic_write(path, _CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, len(header)) + header + blob)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if len(buf) < _CKPT_HEAD.size:
        raise FormatError("truncated checkpoint")
    magic, version, hlen = _CKPT_HEAD.unpack_from(buf)
    if magic != CKPT_MAGIC or version != CKPT_VERSION:
        raise FormatError(f"not a checkpoint (magic={magic!r}, version={version})")
    start = _CKPT_HEAD.size
    header = json.loads(buf[start:start + hlen].decode("utf-8"))
    blob = memoryview(buf)[start + hlen:]
    params = {}
    end = 0
    for e in header["manifest"]:
        lo, n = e["offset"], e["count"]
        if n != int(np.prod(e["shape"], dtype=np.int64)) or lo + 4 * n > len(blob):
            raise FormatError(f"manifest entry {e['name']} inconsistent with blob")
        params[e["name"]] = np.frombuffer(blob[lo:lo + 4 * n], dtype="<f4").reshape(e["shape"]).copy()
        end = max(end, lo + 4 * n)
    if end != len(blob):
        raise FormatError("trailing bytes after parameter blob")
    return header, params


def load_checkpoint(path, expected: ModelConfig | None = None) -> ActionLocalizer:
    """Rebuild the model from its stored config and weights.

    With ``expected`` given, the stored config must match it exactly.
    """
    header, params = read_checkpoint(path)
    cfg = ModelConfig.from_dict(header["config"])
    if expected is not None and expected.to_dict() != cfg.to_dict():
        diff = {k: (v, cfg.to_dict()[k]) for k, v in expected.to_dict().items() if cfg.to_dict()[k] != v}
        raise ValueError(f"checkpoint config mismatch: {diff}")
    model = ActionLocalizer(cfg, seed=0)
    names = [n for n, _ in model.named_parameters()]
    if names != [e["name"] for e in header["manifest"]]:
        raise ValueError("checkpoint manifest does not match the architecture built from its config")
    with T.precision(np.float32):
        model.load_state_dict(params)
    return model
