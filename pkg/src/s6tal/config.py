"""Run configuration: one JSON document covering model, optimizer, data and evaluation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .backbone import ModelConfig
from .data import SynthSpec
from .metrics import resolve_thresholds
from .train import InferConfig, OptimConfig

SECTIONS = ("model", "optim", "infer", "synth", "data")


@dataclass
class DataPaths:
    annotations: str | None = None
    feature_dir: str | None = None  # defaults to <annotations dir>/features


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)
    data: DataPaths = field(default_factory=DataPaths)
    seed: int = 0
    thresholds: str | list[float] = "thumos"
    eval_every: int = 1
    # sections present in the source document, used to decide what must match a checkpoint
    explicit: frozenset = frozenset()

    def __post_init__(self):
        resolve_thresholds(self.thresholds)
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError(f"seed must be a u64, got {self.seed}")
        if self.eval_every < 0:
            raise ValueError("eval_every must be >= 0")

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "optim": asdict(self.optim),
            "infer": asdict(self.infer),
            "synth": self.synth.to_dict(),
            "data": asdict(self.data),
            "seed": self.seed,
            "thresholds": self.thresholds,
            "eval_every": self.eval_every,
        }

    @classmethod
    def from_dict(cls, doc: dict, base_dir: Path | None = None) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ValueError("config must be a JSON object")
        allowed = set(SECTIONS) | {"seed", "thresholds", "eval_every"}
        unknown = set(doc) - allowed
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        if "model" in doc:
            kw["model"] = ModelConfig.from_dict(doc["model"])
        for key, typ in (("optim", OptimConfig), ("infer", InferConfig), ("synth", SynthSpec), ("data", DataPaths)):
            if key in doc:
                kw[key] = _build(typ, doc[key], key)
        if "optim" in kw:
            kw["optim"].betas = tuple(kw["optim"].betas)
        if "data" in kw and base_dir is not None:
            # relative dataset paths resolve against the config file's directory
            for name in ("annotations", "feature_dir"):
                v = getattr(kw["data"], name)
                if v is not None and not Path(v).is_absolute():
                    setattr(kw["data"], name, str(base_dir / v))
        for key in ("seed", "thresholds", "eval_every"):
            if key in doc:
                kw[key] = doc[key]
        return cls(**kw, explicit=frozenset(k for k in doc if k in SECTIONS))


def _build(typ, values, section: str):
    if not isinstance(values, dict):
        raise ValueError(f"config section {section!r} must be an object")
    known = {f.name for f in fields(typ)}
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"unknown {section} fields: {sorted(unknown)}")
    return typ(**values)


def load_run_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON ({exc})") from None
    return RunConfig.from_dict(doc, base_dir=path.parent)
