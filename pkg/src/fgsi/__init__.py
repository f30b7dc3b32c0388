"""Bag-level relation extraction with segment-weighted word embeddings and
threshold-gated sentence attention, on a small numpy autodiff engine."""

from .corpus import SentenceInstance, SynthConfig, build_bags, generate_synthetic, load_jsonl
from .model import FGSIConfig, FGSIModel
from .pipeline import desk_config, evaluate, train
from .trainer import load_checkpoint, save_checkpoint

__all__ = [
    "FGSIConfig", "FGSIModel", "SentenceInstance", "SynthConfig", "build_bags", "desk_config",
    "evaluate", "generate_synthetic", "load_checkpoint", "load_jsonl", "save_checkpoint", "train",
]
