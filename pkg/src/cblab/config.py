"""Experiment configuration: defaults, INI-style config files, CLI overrides."""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field
from pathlib import Path

from .embed import DEFAULT_SIGMA, ENCODER_KINDS, EncoderSpec
from .scenegen import ConfigError, DATASET_KINDS, DEFAULT_COUNTS
from .train import TrainConfig
from .compose import MODELS

SEED_ENV_VAR = "CBL_SEED"


@dataclass
class ExperimentConfig:
    dataset: str = "single"
    counts: dict = field(default_factory=dict)      # empty -> per-kind defaults
    seed: int = 0                                   # master seed (data + encoder)
    encoder: str = "structured"                     # bag|structured|raster|import:<path>
    sigma: float = DEFAULT_SIGMA
    grid: int = 16
    models: list = field(default_factory=lambda: list(MODELS))
    train: TrainConfig = field(default_factory=TrainConfig)
    calibrate: bool = False
    calibration_fraction: float = 0.1
    taxonomy_split: str = "generalization"
    out_dir: str = "runs"
    formats: list = field(default_factory=lambda: ["csv", "md"])
    figures: bool = True

    def __post_init__(self):
        if self.dataset not in DATASET_KINDS:
            raise ConfigError(f"unknown dataset kind: {self.dataset!r}")
        base_encoder = self.encoder.split(":", 1)[0]
        if base_encoder not in ENCODER_KINDS + ("import",):
            raise ConfigError(f"unknown encoder: {self.encoder!r}")
        if base_encoder == "import" and ":" not in self.encoder:
            raise ConfigError("import encoder needs a path: import:<file>")
        for model in self.models:
            if model not in MODELS:
                raise ConfigError(f"unknown model: {model!r}")
        if not self.models:
            raise ConfigError("at least one model is required")
        if self.calibrate and self.dataset == "relational":
            raise ConfigError("calibration is not applicable to the relational dataset")
        if not (0.0 < self.calibration_fraction < 1.0):
            raise ConfigError("calibration fraction must be in (0, 1)")
        for fmt in self.formats:
            if fmt not in ("csv", "md"):
                raise ConfigError(f"unknown report format: {fmt!r}")

    def resolved_counts(self) -> dict:
        counts = dict(DEFAULT_COUNTS[self.dataset])
        counts.update(self.counts)
        return counts

    def encoder_spec(self) -> EncoderSpec:
        if self.encoder.startswith("import:"):
            return EncoderSpec(kind="import", dim=self.train.dim,
                               import_path=self.encoder.split(":", 1)[1])
        return EncoderSpec(kind=self.encoder, dim=self.train.dim,
                           sigma=self.sigma, grid=self.grid)

    def run_dir(self) -> Path:
        return Path(self.out_dir) / f"run-seed{self.seed}"


def _parse_counts(text: str) -> dict:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if len(parts) != 3:
        raise ConfigError(f"counts must be 'train,val,gen', got {text!r}")
    try:
        values = [int(p) for p in parts]
    except ValueError:
        raise ConfigError(f"counts must be integers, got {text!r}") from None
    return dict(zip(("train", "validation", "generalization"), values))


def load_config(path) -> ExperimentConfig:
    """Read an INI config file with sections [dataset], [encoder], [train],
    [eval], [report]; missing keys keep their defaults."""
    parser = configparser.ConfigParser()
    read = parser.read(Path(path))
    if not read:
        raise ConfigError(f"cannot read config file: {path}")
    cfg = ExperimentConfig()

    if parser.has_section("dataset"):
        sec = parser["dataset"]
        cfg.dataset = sec.get("kind", cfg.dataset)
        if "counts" in sec:
            cfg.counts = _parse_counts(sec["counts"])
        cfg.seed = sec.getint("seed", cfg.seed)

    if parser.has_section("encoder"):
        sec = parser["encoder"]
        cfg.encoder = sec.get("kind", cfg.encoder)
        cfg.sigma = sec.getfloat("sigma", cfg.sigma)
        cfg.grid = sec.getint("grid", cfg.grid)
        cfg.train.dim = sec.getint("dim", cfg.train.dim)

    if parser.has_section("train"):
        sec = parser["train"]
        t = cfg.train
        t.learning_rate = sec.getfloat("learning_rate", t.learning_rate)
        t.weight_decay = sec.getfloat("weight_decay", t.weight_decay)
        t.batch_size = sec.getint("batch_size", t.batch_size)
        t.epochs = sec.getint("epochs", t.epochs)
        t.seeds = sec.getint("seeds", t.seeds)
        t.score_normalization = sec.getboolean("score_normalization", t.score_normalization)
        t.logit_scale = sec.getfloat("logit_scale", t.logit_scale)
        t.softmax = sec.get("softmax", t.softmax)
        negatives = sec.get("negatives", "").strip()
        if negatives:
            t.negatives = negatives if negatives == "all" else int(negatives)
        if "models" in sec:
            cfg.models = [m.strip() for m in sec["models"].split(",") if m.strip()]

    if parser.has_section("eval"):
        sec = parser["eval"]
        cfg.train.tie_policy = sec.get("tie_policy", cfg.train.tie_policy)
        cfg.train.tie_seed = sec.getint("tie_seed", cfg.train.tie_seed)
        cfg.calibrate = sec.getboolean("calibrate", cfg.calibrate)
        cfg.calibration_fraction = sec.getfloat("calibration_fraction", cfg.calibration_fraction)
        cfg.taxonomy_split = sec.get("taxonomy_split", cfg.taxonomy_split)

    if parser.has_section("report"):
        sec = parser["report"]
        cfg.out_dir = sec.get("out", cfg.out_dir)
        if "formats" in sec:
            cfg.formats = [f.strip() for f in sec["formats"].split(",") if f.strip()]
        cfg.figures = sec.getboolean("figures", cfg.figures)

    return validate(cfg)


def save_config(cfg: ExperimentConfig, path) -> None:
    parser = configparser.ConfigParser()
    counts = cfg.resolved_counts()
    parser["dataset"] = {
        "kind": cfg.dataset,
        "counts": f"{counts['train']},{counts['validation']},{counts['generalization']}",
        "seed": str(cfg.seed),
    }
    parser["encoder"] = {
        "kind": cfg.encoder,
        "sigma": repr(cfg.sigma),
        "grid": str(cfg.grid),
        "dim": str(cfg.train.dim),
    }
    parser["train"] = {
        "learning_rate": repr(cfg.train.learning_rate),
        "weight_decay": repr(cfg.train.weight_decay),
        "batch_size": str(cfg.train.batch_size),
        "epochs": str(cfg.train.epochs),
        "seeds": str(cfg.train.seeds),
        "negatives": str(cfg.train.negatives),
        "score_normalization": str(cfg.train.score_normalization).lower(),
        "logit_scale": repr(cfg.train.logit_scale),
        "softmax": cfg.train.softmax,
        "models": ",".join(cfg.models),
    }
    parser["eval"] = {
        "tie_policy": cfg.train.tie_policy,
        "tie_seed": str(cfg.train.tie_seed),
        "calibrate": str(cfg.calibrate).lower(),
        "calibration_fraction": repr(cfg.calibration_fraction),
        "taxonomy_split": cfg.taxonomy_split,
    }
    parser["report"] = {
        "out": cfg.out_dir,
        "formats": ",".join(cfg.formats),
        "figures": str(cfg.figures).lower(),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        parser.write(fh)


def apply_seed_env(cfg: ExperimentConfig) -> ExperimentConfig:
    """CBL_SEED overrides the master seed when set."""
    value = os.environ.get(SEED_ENV_VAR)
    if value is not None:
        try:
            cfg.seed = int(value)
        except ValueError:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {value!r}") from None
    return cfg


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    cfg.__post_init__()
    cfg.train.__post_init__()
    if cfg.train.tie_policy not in ("lowest_index", "adversarial", "random"):
        raise ConfigError(f"unknown tie policy: {cfg.train.tie_policy!r}")
    if cfg.taxonomy_split not in ("train", "validation", "generalization"):
        raise ConfigError(f"unknown taxonomy split: {cfg.taxonomy_split!r}")
    return cfg
