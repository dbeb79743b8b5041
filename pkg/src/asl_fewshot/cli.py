"""Command-line entry point: generate, train, eval, ablate, sweep and summarize.

Settings come from three layers, later ones winning: dataclass defaults, a
``key = value`` config file (``--config``), then command-line flags.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import hashlib
import io
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .checkpoint import load_checkpoint, parameter_checksum, save_checkpoint
from .data import generate_synthetic, load_manifest, split_corpus, write_corpus
from .errors import ConfigError, FormatError, IngestionError, SamplingError, ShapeError, TrainingError
from .model import Ablation
from .trainer import ABLATION_ROWS, MetricsReport, TrainConfig, evaluate, run, sweep_configs, with_overrides

logger = logging.getLogger("asl_fewshot")

COMMANDS = ("generate", "train", "eval", "ablate", "sweep", "summarize")
SECTION = "run"


@dataclass
class DataConfig:
    """Where episodes come from: a manifest on disk, or the synthetic generator."""

    manifest: Optional[str] = None
    attributes: Optional[str] = None
    image_size: Optional[int] = None
    train_classes: int = 12
    num_classes: int = 20
    samples_per_class: int = 40
    num_attributes: int = 16
    data_seed: int = 0
    # synthetic nuisance settings
    attribute_jitter: float = 0.1
    pixel_noise: float = 0.05
    max_distractors: int = 3
    trait_amplitude: float = 0.8
    trait_dropout: float = 0.0

    def synthetic(self, seed: int):
        return generate_synthetic(
            num_classes=self.num_classes,
            samples_per_class=self.samples_per_class,
            num_attributes=self.num_attributes,
            image_size=self.image_size or 32,
            seed=seed,
            attribute_jitter=self.attribute_jitter,
            pixel_noise=self.pixel_noise,
            max_distractors=self.max_distractors,
            trait_amplitude=self.trait_amplitude,
            trait_dropout=self.trait_dropout,
        )

    def load(self):
        if self.manifest or self.attributes:
            if not (self.manifest and self.attributes):
                raise ConfigError("manifest and attributes must be given together")
            return load_manifest(self.manifest, self.attributes, self.image_size)
        return self.synthetic(self.data_seed)


@dataclass
class RunConfig:
    command: str = "train"
    out: str = "runs/latest"
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    sweep_axis: Optional[str] = None
    sweep_values: Optional[list] = None
    checkpoint: Optional[str] = None
    rows: Optional[list] = None

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}; choose from {', '.join(COMMANDS)}")
        if self.command == "sweep" and self.sweep_axis is None:
            raise ConfigError("sweep needs sweep_axis (alpha or kernels)")
        if self.sweep_values is not None:
            self.sweep_values = normalize_sweep_values(self.sweep_axis, self.sweep_values)
            if not self.sweep_values:
                raise ConfigError("sweep_values must be nonempty")
        if self.rows is not None:
            self.rows = list(self.rows)

    def to_dict(self) -> dict:
        """Flat key -> value mapping; ``from_dict`` inverts it."""
        d = {"command": self.command, "out": self.out}
        d.update(self.train.to_dict())
        d.update(dataclasses.asdict(self.data))
        d.update(sweep_axis=self.sweep_axis, sweep_values=self.sweep_values, checkpoint=self.checkpoint, rows=self.rows)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        unknown = set(d) - set(FIELD_TYPES)
        if unknown:
            raise ConfigError(f"unknown config field {sorted(unknown)[0]!r}")
        train = {k: d.pop(k) for k in list(d) if k in TRAIN_FIELDS}
        data = {k: d.pop(k) for k in list(d) if k in DATA_FIELDS}
        return cls(train=TrainConfig(**train), data=DataConfig(**data), **d)


# -- value parsing -------------------------------------------------------------------


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.replace(" ", "").split(",") if v]


def _name_list(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _optional(parse):
    def inner(text: str):
        return None if text.strip().lower() in ("", "none") else parse(text)

    return inner


TRAIN_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)}
DATA_FIELDS = {f.name for f in dataclasses.fields(DataConfig)}

# text parser per field, used for config files and flags alike
FIELD_TYPES = {
    "command": str,
    "out": str,
    "n_way": int,
    "m_shot": int,
    "q_per_class": int,
    "alpha": float,
    "lr": float,
    "iterations": int,
    "eval_tasks": int,
    "seed": int,
    "kernel_sizes": _int_list,
    "ablation": _name_list,
    "channels": int,
    "model": str,
    "loss_reduction": str,
    "train_q_per_class": _optional(int),
    "lr_decay_every": int,
    "lr_decay_gamma": float,
    "log_every": int,
    "manifest": _optional(str),
    "attributes": _optional(str),
    "image_size": _optional(int),
    "train_classes": int,
    "num_classes": int,
    "samples_per_class": int,
    "num_attributes": int,
    "data_seed": int,
    "attribute_jitter": float,
    "pixel_noise": float,
    "max_distractors": int,
    "trait_amplitude": float,
    "trait_dropout": float,
    "sweep_axis": _optional(str),
    "sweep_values": _optional(str),
    "checkpoint": _optional(str),
    "rows": _optional(lambda t: [r.strip() for r in t.split(";") if r.strip()]),
}


def parse_value(key: str, text: str):
    if key not in FIELD_TYPES:
        raise ConfigError(f"unknown config field {key!r}")
    try:
        return FIELD_TYPES[key](text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {exc}") from None


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines (``#`` comments allowed) into typed values."""
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"), inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string(f"[{SECTION}]\n" + path.read_text(encoding="utf-8"), source=str(path))
    except configparser.Error as exc:
        raise FormatError(f"{path}: {exc}") from None
    return {k: parse_value(k, v) for k, v in parser.items(SECTION)}


def normalize_sweep_values(axis: Optional[str], values) -> list:
    """Alpha values as floats, kernel sets as int tuples; text is parsed first.

    In text, alphas are comma separated; kernel sets are separated by ';'
    with sizes inside a set separated by ','.
    """
    if axis not in ("alpha", "kernels"):
        raise ConfigError(f"sweep_values needs sweep_axis alpha or kernels, got {axis!r}")
    try:
        if isinstance(values, str):
            if axis == "alpha":
                values = [v for v in values.split(",") if v.strip()]
            else:
                values = [_int_list(group) for group in values.split(";") if group.strip()]
        if axis == "alpha":
            return [float(v) for v in values]
        return [tuple(int(k) for k in ks) for ks in values]
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad sweep_values: {exc}") from None


# -- argument handling --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="asl-fewshot", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("runs", nargs="*", help="run directories (summarize only)")
    parser.add_argument("--config", help="key = value settings file")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--n-way", dest="n_way", type=int)
    parser.add_argument("--m-shot", dest="m_shot", type=int)
    parser.add_argument("--alpha", type=float)
    parser.add_argument("--kernels", dest="kernel_sizes", type=_int_list, help="e.g. 3,5,7,9")
    parser.add_argument("--ablate", dest="ablation", type=_name_list, help="FLAG[,FLAG...]")
    parser.add_argument("--tasks", dest="eval_tasks", type=int, help="evaluation task count")
    parser.add_argument("--iterations", type=int)
    parser.add_argument("--axis", dest="sweep_axis", choices=("alpha", "kernels"))
    parser.add_argument("--values", dest="sweep_values", help="alpha list '0,0.5' or kernel sets '3;3,5'")
    parser.add_argument("--checkpoint", help="checkpoint to evaluate")
    parser.add_argument("--manifest")
    parser.add_argument("--attributes")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Merge defaults, config file and flags (flag > file > default)."""
    settings = read_config_file(args.config) if args.config else {}
    settings["command"] = args.command
    for key in (
        "seed", "out", "n_way", "m_shot", "alpha", "kernel_sizes", "ablation", "eval_tasks",
        "iterations", "sweep_axis", "sweep_values", "checkpoint", "manifest", "attributes",
    ):
        value = getattr(args, key)
        if value is not None:
            settings[key] = value
    return RunConfig.from_dict(settings)


# -- outputs ------------------------------------------------------------------------------


def config_digest(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:12]


def _fmt(value, spec=".4f") -> str:
    return "-" if value is None else format(value, spec)


def summarize(run_dirs: Sequence, out_dir=None) -> tuple[str, str]:
    """Comparison table over run directories, best accuracy first, ties by name.

    A directory whose report is missing or malformed still gets a row, marked
    with the problem, and a logged warning.
    """
    good, bad = [], []
    for d in run_dirs:
        d = Path(d)
        try:
            rep = MetricsReport.load(d / "metrics.json")
            if rep.mean_accuracy is None:
                raise ValueError("no accuracy recorded")
            good.append((d.name, rep))
        except (OSError, ValueError, TypeError, KeyError) as exc:
            logger.warning("skipping %s: %s", d, exc)
            bad.append((d.name, str(exc)))
    good.sort(key=lambda item: (-item[1].mean_accuracy, item[0]))

    header = ["run", "config", "accuracy", "ci95", "attr_mae", "status"]
    rows = [
        [name, config_digest(rep.config), _fmt(rep.mean_accuracy), _fmt(rep.ci95), _fmt(rep.attr_mae), "ok"]
        for name, rep in good
    ]
    rows += [[name, "-", "-", "-", "-", f"malformed: {msg}"] for name, msg in sorted(bad)]

    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows([header] + rows)
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip() for r in [header] + rows]
    for name, rep in good:
        pct, ci = 100 * rep.mean_accuracy, 100 * rep.ci95
        lines.append(f"# {name}: {pct:.2f} +- {ci:.2f}")
    text = "\n".join(lines) + "\n"

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "summary.txt").write_text(text, encoding="utf-8")
        (out_dir / "summary.csv").write_text(buf.getvalue(), encoding="utf-8")
    return text, buf.getvalue()


def _finish_run(cfg: RunConfig, out: Path, model, report: MetricsReport) -> None:
    out.mkdir(parents=True, exist_ok=True)
    report.config = cfg.to_dict()
    report.save(out / "metrics.json")
    save_checkpoint(model, out / "checkpoint.bin")
    summarize([out], out)
    logger.info(
        "%s: accuracy %.4f +- %.4f, attr MAE %s, checksum %s",
        out, report.mean_accuracy, report.ci95, _fmt(report.attr_mae), parameter_checksum(model)[:12],
    )


# -- commands -------------------------------------------------------------------------------


def cmd_generate(cfg: RunConfig) -> None:
    corpus = cfg.data.synthetic(cfg.train.seed)
    write_corpus(corpus, cfg.out)
    logger.info("wrote %d images to %s", len(corpus), cfg.out)


def cmd_train(cfg: RunConfig) -> None:
    split = split_corpus(cfg.data.load(), cfg.data.train_classes)
    model, report = run(cfg.train, split)
    _finish_run(cfg, Path(cfg.out), model, report)


def cmd_eval(cfg: RunConfig) -> None:
    if not cfg.checkpoint:
        raise ConfigError("eval needs --checkpoint")
    if not Path(cfg.checkpoint).is_file():
        raise IngestionError(f"checkpoint not found: {cfg.checkpoint}")
    model = load_checkpoint(cfg.checkpoint)
    split = split_corpus(cfg.data.load(), cfg.data.train_classes)
    t = cfg.train
    report = MetricsReport(config={})
    evaluate(model, split.test, t.eval_tasks, t.n_way, t.m_shot, t.q_per_class, seed=t.seed, report=report)
    _finish_run(cfg, Path(cfg.out), model, report)


def _subdir_name(label: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "=.-" else "_" for ch in label)


def cmd_ablate(cfg: RunConfig) -> None:
    split = split_corpus(cfg.data.load(), cfg.data.train_classes)
    out = Path(cfg.out)
    names = cfg.rows or list(ABLATION_ROWS)
    unknown = [n for n in names if n not in ABLATION_ROWS]
    if unknown:
        raise ConfigError(f"unknown ablation rows {unknown}")
    dirs = []
    for name in names:
        sub = dataclasses.replace(cfg, train=with_overrides(cfg.train, ablation=Ablation.from_flags(ABLATION_ROWS[name])))
        model, report = run(sub.train, split)
        dirs.append(out / _subdir_name(name))
        _finish_run(sub, dirs[-1], model, report)
    summarize(dirs, out)


def cmd_sweep(cfg: RunConfig) -> None:
    split = split_corpus(cfg.data.load(), cfg.data.train_classes)
    out = Path(cfg.out)
    dirs = []
    for label, train_cfg in sweep_configs(cfg.train, cfg.sweep_axis, cfg.sweep_values):
        sub = dataclasses.replace(cfg, train=train_cfg)
        model, report = run(train_cfg, split)
        dirs.append(out / _subdir_name(label))
        _finish_run(sub, dirs[-1], model, report)
    summarize(dirs, out)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        if args.command == "summarize":
            if not args.runs:
                raise ConfigError("summarize needs at least one run directory")
            text, _ = summarize(args.runs, args.out)
            sys.stdout.write(text)
            return 0
        if args.runs:
            raise ConfigError(f"unexpected arguments {args.runs}")
        cfg = resolve_config(args)
        {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "sweep": cmd_sweep}[
            cfg.command
        ](cfg)
    except (ConfigError, FormatError, IngestionError, SamplingError, ShapeError) as exc:
        logger.error("error: %s", exc)
        return 2
    except TrainingError as exc:
        logger.error("training failed: %s", exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
