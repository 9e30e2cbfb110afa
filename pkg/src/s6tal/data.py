"""Feature, annotation and prediction files plus the synthetic dataset generator.

Feature file layout (little endian)::

    bytes 0-3   magic b"RDF6"
    u32         version (1)
    u32         C
    u32         L
    C*L f32     channel-major values
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .heads import ActionSegment

MAGIC = b"RDF6"
VERSION = 1
_HEADER = struct.Struct("<4sIII")
MAX_EXTENT = 1 << 28


class FormatError(ValueError):
    pass


def atomic_write(path: str | os.PathLike, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------


def encode_features(feats: np.ndarray) -> bytes:
    feats = np.asarray(feats)
    if feats.ndim == 3:
        if feats.shape[0] != 1:
            raise ValueError("feature files hold a single video: expected [1, C, L]")
        feats = feats[0]
    if feats.ndim != 2:
        raise ValueError(f"expected [C, L] features, got shape {feats.shape}")
    C, L = feats.shape
    return _HEADER.pack(MAGIC, VERSION, C, L) + np.ascontiguousarray(feats, dtype="<f4").tobytes()


def decode_features(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise FormatError("truncated feature header")
    magic, version, C, L = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if C == 0 or L == 0 or C > MAX_EXTENT or L > MAX_EXTENT or C * L > MAX_EXTENT:
        raise FormatError(f"implausible extents C={C}, L={L}")
    need = _HEADER.size + 4 * C * L
    if len(buf) != need:
        raise FormatError(f"payload length {len(buf) - _HEADER.size} != {4 * C * L}")
    data = np.frombuffer(buf, dtype="<f4", offset=_HEADER.size).astype(np.float32).reshape(C, L)
    return data[None]


def save_features(path, feats: np.ndarray) -> None:
    atomic_write(path, encode_features(feats))


def load_features(path) -> np.ndarray:
    """Return a [1, C, L] float32 array."""
    return decode_features(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# annotations
# ---------------------------------------------------------------------------


@dataclass
class VideoRecord:
    video_id: str
    duration: float
    subset: str
    annotations: list[tuple[tuple[float, float], str]]
    feature_path: str
    clip_stride_seconds: float

    def segments(self, label_map: dict[str, int]) -> list[ActionSegment]:
        return [ActionSegment(s, e, label_map[lab]) for (s, e), lab in self.annotations]


@dataclass
class AnnotationDB:
    videos: dict[str, VideoRecord]
    labels: list[str]
    clip_stride_seconds: float

    @property
    def label_map(self) -> dict[str, int]:
        return {name: i for i, name in enumerate(self.labels)}

    def subset(self, name: str) -> list[VideoRecord]:
        return [v for v in self.videos.values() if v.subset == name]

    def ground_truth(self, subset: str | None = None) -> dict[str, list[ActionSegment]]:
        lm = self.label_map
        return {v.video_id: v.segments(lm) for v in self.videos.values() if subset is None or v.subset == subset}


def parse_annotations(doc: dict, feature_dir: str | os.PathLike = ".") -> AnnotationDB:
    if not isinstance(doc, dict) or not {"database", "labels", "clip_stride_seconds"} <= set(doc):
        raise ValueError("annotation file needs 'database', 'labels' and 'clip_stride_seconds'")
    labels = doc["labels"]
    if not isinstance(labels, list) or not all(isinstance(s, str) for s in labels):
        raise ValueError("'labels' must be a list of strings")
    if len(set(labels)) != len(labels):
        raise ValueError("duplicate label names")
    stride = float(doc["clip_stride_seconds"])
    if stride <= 0:
        raise ValueError("clip_stride_seconds must be positive")
    db = doc["database"]
    if not isinstance(db, dict):
        raise ValueError("'database' must be an object keyed by video id")
    videos: dict[str, VideoRecord] = {}
    for vid, entry in db.items():
        try:
            duration = float(entry["duration"])
            subset = entry["subset"]
            anns = entry["annotations"]
        except (KeyError, TypeError) as exc:
            raise ValueError(f"{vid}: missing field {exc}") from None
        if subset not in ("train", "val"):
            raise ValueError(f"{vid}: subset must be 'train' or 'val', got {subset!r}")
        parsed = []
        for a in anns:
            seg, lab = a.get("segment"), a.get("label")
            if not isinstance(seg, (list, tuple)) or len(seg) != 2:
                raise ValueError(f"{vid}: segment must be [start, end]")
            s, e = float(seg[0]), float(seg[1])
            if not 0 <= s < e <= duration:
                raise ValueError(f"{vid}: segment [{s}, {e}] violates 0 <= start < end <= {duration}")
            if lab not in labels:
                raise ValueError(f"{vid}: unknown label {lab!r}")
            parsed.append(((s, e), lab))
        feat = entry.get("feature_path", f"{vid}.rdf6")
        videos[vid] = VideoRecord(vid, duration, subset, parsed, str(Path(feature_dir) / feat), stride)
    return AnnotationDB(videos, list(labels), stride)


def _reject_duplicate_keys(pairs):
    seen = {}
    for k, v in pairs:
        if k in seen:
            raise ValueError(f"duplicate key {k!r}")
        seen[k] = v
    return seen


def load_annotations(path, feature_dir=None) -> AnnotationDB:
    path = Path(path)
    doc = json.loads(path.read_text(), object_pairs_hook=_reject_duplicate_keys)
    return parse_annotations(doc, feature_dir if feature_dir is not None else path.parent / "features")


# ---------------------------------------------------------------------------
# predictions
# ---------------------------------------------------------------------------


def predictions_doc(results: dict[str, list[ActionSegment]], labels: list[str]) -> dict:
    out = {}
    for vid in sorted(results):
        segs = sorted(results[vid], key=lambda s: (-s.score, s.start, s.end, s.label))
        out[vid] = [{"segment": [s.start, s.end], "label": labels[s.label], "score": s.score} for s in segs]
    return {"results": out}


def write_predictions(results: dict[str, list[ActionSegment]], path, labels: list[str]) -> None:
    atomic_write_text(path, json.dumps(predictions_doc(results, labels), indent=1))


def load_predictions(path, labels: list[str]) -> dict[str, list[ActionSegment]]:
    doc = json.loads(Path(path).read_text())
    lm = {n: i for i, n in enumerate(labels)}
    return {vid: [ActionSegment(float(p["segment"][0]), float(p["segment"][1]), lm[p["label"]], float(p["score"]))
                  for p in segs]
            for vid, segs in doc["results"].items()}


# ---------------------------------------------------------------------------
# synthetic dataset
# ---------------------------------------------------------------------------


@dataclass
class SynthSpec:
    num_videos: int = 50
    num_classes: int = 3
    feature_dim: int = 32
    length_range: tuple[int, int] = (176, 208)
    segments_range: tuple[int, int] = (2, 4)
    segment_length_range: tuple[int, int] = (8, 48)  # in clips
    noise: float = 0.1
    amplitude: float = 1.0
    signature_channels: int = 8
    clip_stride_seconds: float = 1.0
    val_fraction: float = 0.2
    seed: int = 42
    max_retries: int = 200
    frequencies: list[float] = field(default_factory=list)  # cycles per clip; derived when empty

    def __post_init__(self):
        self.length_range = tuple(self.length_range)
        self.segments_range = tuple(self.segments_range)
        self.segment_length_range = tuple(self.segment_length_range)
        for name in ("length_range", "segments_range", "segment_length_range"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ValueError(f"{name} must be a non-empty range, got {(lo, hi)}")
        if self.num_videos < 1 or self.num_classes < 1 or self.feature_dim < 1:
            raise ValueError("num_videos, num_classes and feature_dim must be positive")
        if self.signature_channels > self.feature_dim:
            raise ValueError("signature_channels exceeds feature_dim")
        if self.segment_length_range[0] < 1:
            raise ValueError("segments need at least one clip")

    def class_frequencies(self) -> np.ndarray:
        if self.frequencies:
            return np.asarray(self.frequencies, dtype=np.float64)
        return np.linspace(0.04, 0.25, self.num_classes)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("length_range", "segments_range", "segment_length_range"):
            d[k] = list(d[k])
        return d


@dataclass
class ClassSignature:
    frequency: float
    channels: np.ndarray
    phases: np.ndarray


def class_signatures(spec: SynthSpec, rng: np.random.Generator) -> list[ClassSignature]:
    freqs = spec.class_frequencies()
    return [ClassSignature(float(freqs[c]),
                           np.sort(rng.choice(spec.feature_dim, spec.signature_channels, replace=False)),
                           rng.uniform(0, 2 * np.pi, spec.signature_channels))
            for c in range(spec.num_classes)]


def _place_segments(rng, L: int, count: int, len_range, max_retries: int) -> list[tuple[int, int]]:
    placed: list[tuple[int, int]] = []
    for _ in range(count):
        for _attempt in range(max_retries):
            n = int(rng.integers(len_range[0], min(len_range[1], L) + 1))
            s = int(rng.integers(0, L - n + 1))
            if all(s + n <= a or b <= s for a, b in placed):
                placed.append((s, s + n))
                break
        else:
            raise ValueError(f"could not place {count} non-overlapping segments in length {L}; "
                         "shorten segment_length_range or lengthen length_range")
    return sorted(placed)


def render_video(spec: SynthSpec, sigs: list[ClassSignature], rng: np.random.Generator):
    """One video's features [C, L] and its (start_clip, end_clip, class) list."""
    L = int(rng.integers(spec.length_range[0], spec.length_range[1] + 1))
    count = int(rng.integers(spec.segments_range[0], spec.segments_range[1] + 1))
    spans = _place_segments(rng, L, count, spec.segment_length_range, spec.max_retries)
    feats = rng.normal(0.0, spec.noise, size=(spec.feature_dim, L))
    events = []
    for a, b in spans:
        c = int(rng.integers(spec.num_classes))
        sig = sigs[c]
        t = np.arange(b - a)
        wave = 0.5 * (1.0 + np.sin(2 * np.pi * sig.frequency * t[None, :] + sig.phases[:, None]))
        feats[sig.channels, a:b] += spec.amplitude * wave
        events.append((a, b, c))
    return feats.astype(np.float32), events


def synth_generate(spec: SynthSpec, out_dir) -> dict:
    """Write features/, annotations.json and manifest.json under ``out_dir``."""
    out = Path(out_dir)
    rng = np.random.default_rng(spec.seed)
    sigs = class_signatures(spec, rng)
    labels = [f"action_{c}" for c in range(spec.num_classes)]
    n_val = int(round(spec.val_fraction * spec.num_videos))
    database = {}
    hasher = hashlib.sha256()
    for i in range(spec.num_videos):
        vid = f"video_{i:04d}"
        feats, events = render_video(spec, sigs, rng)
        payload = encode_features(feats)
        atomic_write(out / "features" / f"{vid}.rdf6", payload)
        hasher.update(payload)
        dt = spec.clip_stride_seconds
        database[vid] = {
            "duration": feats.shape[1] * dt,
            "subset": "val" if i >= spec.num_videos - n_val else "train",
            "annotations": [{"segment": [a * dt, b * dt], "label": labels[c]} for a, b, c in events],
            "feature_path": f"{vid}.rdf6",
        }
    doc = {"database": database, "labels": labels, "clip_stride_seconds": spec.clip_stride_seconds}
    ann_text = json.dumps(doc, indent=1, sort_keys=True)
    hasher.update(ann_text.encode())
    atomic_write_text(out / "annotations.json", ann_text)
    manifest = {
        "spec": spec.to_dict(),
        "num_videos": spec.num_videos,
        "num_segments": sum(len(v["annotations"]) for v in database.values()),
        "subsets": {s: sum(v["subset"] == s for v in database.values()) for s in ("train", "val")},
        "signatures": [{"label": labels[c], "frequency": s.frequency, "channels": s.channels.tolist()}
                       for c, s in enumerate(sigs)],
        "content_hash": hasher.hexdigest(),
    }
    atomic_write_text(out / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True))
    return manifest
