"""Episodic training, evaluation with confidence intervals, and ablation runs."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .data import ClassPool, CorpusSplit, sample_episode
from .errors import ConfigError, TrainingError
from .model import DEFAULT_KERNELS, Ablation, ASLModel, ModelConfig, ProtoNet
from .optim import AdamState, adam_step
from .seeding import derive_rng
from .tensor import backward, no_grad

logger = logging.getLogger(__name__)

ALPHA_SWEEP = (0.0, 0.001, 0.01, 0.1, 0.5, 1.0, 2.0)
KERNEL_SWEEP = ((3,), (5,), (7,), (9,), (3, 5, 7), (5, 7, 9), (3, 5, 7, 9))

# Table-III style rows: display name -> ablation flags
ABLATION_ROWS = {
    "ASL": (),
    "w/o VAP": ("no_vap",),
    "w/o CAM": ("no_cam",),
    "w/o PSAM": ("no_psam",),
    "w/o VAP & AVAM": ("no_vap", "no_cam", "no_psam"),
    "Not using attributes": ("no_attributes",),
    "Using all-0 attributes": ("zero_attributes",),
}


@dataclass
class TrainConfig:
    n_way: int = 5
    m_shot: int = 1
    q_per_class: int = 15
    alpha: float = 1.0
    lr: float = 1e-3
    iterations: int = 5000
    eval_tasks: int = 2000
    seed: int = 0
    kernel_sizes: tuple[int, ...] = DEFAULT_KERNELS
    ablation: Ablation = field(default_factory=Ablation)
    channels: int = 32
    model: str = "asl"
    loss_reduction: str = "sum"
    train_q_per_class: Optional[int] = None
    lr_decay_every: int = 0
    lr_decay_gamma: float = 0.5
    log_every: int = 100

    def __post_init__(self):
        self.kernel_sizes = tuple(int(k) for k in self.kernel_sizes)
        if isinstance(self.ablation, (list, tuple)):
            self.ablation = Ablation.from_flags(self.ablation)
        if self.n_way < 2:
            raise ConfigError(f"n_way must be at least 2, got {self.n_way}")
        if self.m_shot < 1:
            raise ConfigError(f"m_shot must be at least 1, got {self.m_shot}")
        if self.q_per_class < 1 or (self.train_q_per_class is not None and self.train_q_per_class < 1):
            raise ConfigError("query counts must be positive")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be non-negative, got {self.alpha}")
        if self.lr < 0:
            raise ConfigError(f"learning rate must be non-negative, got {self.lr}")
        if self.iterations < 0:
            raise ConfigError("iterations must be non-negative")
        if not self.kernel_sizes and not self.ablation.no_psam:
            raise ConfigError("kernel set must be nonempty unless no_psam is set")
        if self.model not in ("asl", "protonet"):
            raise ConfigError(f"model must be 'asl' or 'protonet', got {self.model!r}")

    @property
    def queries_for_training(self) -> int:
        return self.train_q_per_class or self.q_per_class

    def model_config(self, num_attributes: int) -> ModelConfig:
        return ModelConfig(
            num_attributes=num_attributes,
            channels=self.channels,
            kernel_sizes=self.kernel_sizes,
            alpha=self.alpha,
            ablation=self.ablation,
            loss_reduction=self.loss_reduction,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kernel_sizes"] = list(self.kernel_sizes)
        d["ablation"] = self.ablation.flags
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class MetricsReport:
    config: dict
    loss_history: list[dict] = field(default_factory=list)
    mean_accuracy: Optional[float] = None
    ci95: Optional[float] = None
    attr_mae: Optional[float] = None
    task_count: int = 0
    train_seconds: float = 0.0
    eval_seconds: float = 0.0
    task_accuracies: list[float] = field(default_factory=list, repr=False)

    @property
    def wall_clock_seconds(self) -> float:
        return self.train_seconds + self.eval_seconds

    def to_json(self) -> str:
        doc = {
            "mean_accuracy": self.mean_accuracy,
            "ci95": self.ci95,
            "attr_mae": self.attr_mae,
            "task_count": self.task_count,
            "wall_clock_seconds": self.wall_clock_seconds,
            "loss_history": self.loss_history,
            "config": self.config,
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.write_text(self.to_json() + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "MetricsReport":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        missing = {"mean_accuracy", "ci95", "attr_mae", "loss_history", "config"} - set(doc)
        if missing:
            raise ValueError(f"{path}: missing fields {sorted(missing)}")
        wall = doc.get("wall_clock_seconds", 0.0)
        return cls(
            config=doc["config"],
            loss_history=doc["loss_history"],
            mean_accuracy=doc["mean_accuracy"],
            ci95=doc["ci95"],
            attr_mae=doc["attr_mae"],
            task_count=doc.get("task_count", 0),
            train_seconds=wall,
        )


def confidence_interval95(values: Sequence[float]) -> float:
    """Half-width 1.96 * sample std / sqrt(T)."""
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        raise ConfigError("a confidence interval needs at least 2 tasks")
    return float(1.96 * values.std(ddof=1) / math.sqrt(values.size))


def build_model(config: TrainConfig, image_shape: tuple[int, int, int], num_attributes: int):
    if config.model == "protonet":
        return ProtoNet(config.channels, image_shape=image_shape, seed=config.seed, loss_reduction=config.loss_reduction)
    return ASLModel(config.model_config(num_attributes), image_shape=image_shape, seed=config.seed)


def train(config: TrainConfig, train_pool: ClassPool, model=None):
    """Run the episodic loop for ``config.iterations`` steps.

    Each step samples a task, runs the model forward in training mode,
    backpropagates the joint loss and applies one Adam update. Returns the
    trained model and a report holding the loss history.
    """
    corpus = train_pool.corpus
    if model is None:
        model = build_model(config, corpus.image_shape, corpus.num_attributes)
    params = model.params
    state = AdamState(lr=config.lr)
    rng = derive_rng(config.seed, "episodes", "train")
    report = MetricsReport(config=config.to_dict())
    started = time.perf_counter()

    for it in range(1, config.iterations + 1):
        if config.lr_decay_every and it > 1 and (it - 1) % config.lr_decay_every == 0:
            state.lr *= config.lr_decay_gamma
        episode = sample_episode(train_pool, config.n_way, config.m_shot, config.queries_for_training, rng)
        model.zero_grad()
        out = model.forward(episode, training=True)
        total = out.loss.item()
        if not math.isfinite(total):
            raise TrainingError(f"non-finite loss {total} at iteration {it}")
        backward(out.loss)
        adam_step(params, state)
        report.loss_history.append(
            {
                "iteration": it,
                "cls": out.loss_cls.item(),
                "attr": None if out.loss_attr is None else out.loss_attr.item(),
                "total": total,
            }
        )
        if config.log_every and it % config.log_every == 0:
            recent = report.loss_history[-config.log_every :]
            logger.info("iter %d  loss %.4f", it, float(np.mean([r["total"] for r in recent])))
    model.zero_grad()
    report.train_seconds = time.perf_counter() - started
    return model, report


def episode_accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(probs, axis=1) == labels))


def evaluate(
    model,
    test_pool: ClassPool,
    task_count: int = 2000,
    n_way: int = 5,
    m_shot: int = 1,
    q_per_class: int = 15,
    seed: int = 0,
    report: Optional[MetricsReport] = None,
) -> MetricsReport:
    """Mean top-1 accuracy over sampled tasks, its 95% CI, and query attribute MAE.

    Runs in inference mode (frozen normalisation statistics, no graph), so
    parameters and buffers are left untouched.
    """
    if task_count < 2:
        raise ConfigError("task_count must be at least 2 for a confidence interval")
    rng = derive_rng(seed, "episodes", "eval")
    started = time.perf_counter()
    accs, abs_err = [], []
    with no_grad():
        for _ in range(task_count):
            episode = sample_episode(test_pool, n_way, m_shot, q_per_class, rng)
            out = model.forward(episode, training=False)
            accs.append(episode_accuracy(out.probs.data, episode.query_labels))
            if out.predicted_attributes is not None:
                pred_q = out.predicted_attributes.data[len(episode.support_labels) :]
                abs_err.append(np.abs(pred_q - episode.query_attributes).mean())
    if report is None:
        report = MetricsReport(config={})
    report.task_accuracies = accs
    report.task_count = task_count
    report.mean_accuracy = float(np.mean(accs))
    report.ci95 = confidence_interval95(accs)
    report.attr_mae = float(np.mean(abs_err)) if abs_err else None
    report.eval_seconds = time.perf_counter() - started
    return report


def run(config: TrainConfig, split: CorpusSplit):
    """Train on the split's training pool, then evaluate on its test pool."""
    model, report = train(config, split.train)
    evaluate(
        model,
        split.test,
        config.eval_tasks,
        config.n_way,
        config.m_shot,
        config.q_per_class,
        seed=config.seed,
        report=report,
    )
    return model, report


def with_overrides(config: TrainConfig, **changes) -> TrainConfig:
    d = asdict(config)
    d["ablation"] = config.ablation
    d.update(changes)
    return TrainConfig(**d)


def ablate(
    config: TrainConfig,
    split: CorpusSplit,
    rows: Optional[Iterable[str]] = None,
) -> dict[str, tuple[object, MetricsReport]]:
    """Train and evaluate one model per ablation row, under a shared seed."""
    names = list(rows) if rows is not None else list(ABLATION_ROWS)
    unknown = [n for n in names if n not in ABLATION_ROWS]
    if unknown:
        raise ConfigError(f"unknown ablation rows {unknown}")
    results = {}
    for name in names:
        cfg = with_overrides(config, ablation=Ablation.from_flags(ABLATION_ROWS[name]))
        logger.info("ablation row %r", name)
        results[name] = run(cfg, split)
    return results


def sweep_configs(config: TrainConfig, axis: str, values: Optional[Sequence] = None) -> list[tuple[str, TrainConfig]]:
    """Configurations for an alpha or kernel-set sweep, labelled by value."""
    if axis == "alpha":
        values = ALPHA_SWEEP if values is None else values
        return [(f"alpha={float(v):g}", with_overrides(config, alpha=float(v))) for v in values]
    if axis == "kernels":
        values = KERNEL_SWEEP if values is None else values
        return [
            ("kernels=" + "-".join(str(k) for k in ks), with_overrides(config, kernel_sizes=tuple(ks)))
            for ks in values
        ]
    raise ConfigError(f"unknown sweep axis {axis!r}; use 'alpha' or 'kernels'")
