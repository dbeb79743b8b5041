"""Attribute-shaped few-shot recognition on a small numpy autodiff engine."""

from .data import Corpus, Episode, generate_synthetic, load_manifest, sample_episode, split_corpus
from .model import Ablation, ASLModel, ModelConfig, ProtoNet
from .trainer import MetricsReport, TrainConfig, ablate, evaluate, run, train

__version__ = "0.1.0"

__all__ = [
    "Ablation",
    "ASLModel",
    "Corpus",
    "Episode",
    "MetricsReport",
    "ModelConfig",
    "ProtoNet",
    "TrainConfig",
    "ablate",
    "evaluate",
    "generate_synthetic",
    "load_manifest",
    "run",
    "sample_episode",
    "split_corpus",
    "train",
]
