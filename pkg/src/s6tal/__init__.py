"""Selective state-space (S6) temporal action localization on precomputed clip features."""

__version__ = "0.1.0"

from .backbone import ModelConfig
from .data import SynthSpec, load_annotations, synth_generate
from .heads import ActionSegment
from .metrics import mean_ap, nms, tiou
from .model import ActionLocalizer, load_checkpoint, save_checkpoint
from .train import InferConfig, OptimConfig, train

__all__ = [
    "ActionLocalizer", "ActionSegment", "InferConfig", "ModelConfig", "OptimConfig", "SynthSpec",
    "load_annotations", "load_checkpoint", "mean_ap", "nms", "save_checkpoint", "synth_generate", "tiou", "train",
]
