"""Run configuration: defaults, presets, TOML files and dotted-key overrides.

Precedence is flags > config file > preset > defaults.  Every key is listed
in :data:`KEYS` with a short note naming the published constant it mirrors,
which the CLI turns into ``--section.key`` flags.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from .classifier import ClassifierConfig
from .vae import PretrainConfig, VAEConfig


@dataclass(frozen=True)
class DataConfig:
    window_ms: float = 570.0
    image_size: int = 64
    f_min: float = 10.0
    f_max: float = 290.0


@dataclass(frozen=True)
class FoldConfig:
    k: int = 5
    seed: int = 0
    split_ratio: tuple = (119, 30, 36)


@dataclass(frozen=True)
class LabelConfig:
    n_restarts: int = 10
    max_iter: int = 300
    seed: int = 0


@dataclass(frozen=True)
class DistillConfig:
    """Ablation switches: ``sd`` trains the head on weak labels, ``aug`` adds the surrogate term."""
    sd: bool = True
    aug: bool = True


@dataclass(frozen=True)
class AnalysisConfig:
    steps: int = 8
    lo_q: float = 0.001
    hi_q: float = 0.999
    mixing_k: int = 10


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    vae: VAEConfig = field(default_factory=VAEConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    labels: LabelConfig = field(default_factory=LabelConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    folds: FoldConfig = field(default_factory=FoldConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            section = dataclasses.asdict(getattr(self, f.name))
            out[f.name] = {k: list(v) if isinstance(v, tuple) else v for k, v in section.items()}
        return out

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def replace(self, updates: dict) -> "RunConfig":
        """Apply ``{"section.key": value}`` updates, validating every value."""
        sections = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        grouped: dict = {}
        for dotted, value in updates.items():
            section, _, key = dotted.partition(".")
            if section not in sections or key not in {f.name for f in dataclasses.fields(sections[section])}:
                raise ValueError(f"unknown config key {dotted!r}")
            grouped.setdefault(section, {})[key] = _coerce(sections[section], key, value)
        for section, kv in grouped.items():
            sections[section] = dataclasses.replace(sections[section], **kv)
        return RunConfig(**sections).validated()

    def validated(self) -> "RunConfig":
        p, c = self.pretrain, self.classifier
        checks = [
            (self.data.window_ms > 0, "data.window_ms must be positive"),
            (0 < self.data.f_min < self.data.f_max, "need 0 < data.f_min < data.f_max"),
            (self.data.image_size == self.vae.image_size, "data.image_size must equal vae.image_size"),
            (self.vae.latent_dim >= 1, "vae.latent_dim must be positive"),
            (p.epochs >= 1 and p.batch_size >= 1, "pretrain epochs and batch_size must be positive"),
            (p.lr > 0 and p.beta_lr > 0, "pretrain learning rates must be positive"),
            (0.0 <= p.beta_init <= 1.0, "pretrain.beta_init must lie in [0, 1]"),
            (p.per_subject_cap >= 1, "pretrain.per_subject_cap must be positive"),
            (p.perceptual_reduction in ("sum", "mean"), "pretrain.perceptual_reduction is sum or mean"),
            (c.epochs >= 1 and c.batch_size >= 1 and c.lr > 0, "classifier epochs, batch_size, lr must be positive"),
            (0.0 < c.threshold < 1.0, "classifier.threshold must lie in (0, 1)"),
            (self.folds.k >= 2, "folds.k must be at least 2"),
            (self.labels.n_restarts >= 1, "labels.n_restarts must be positive"),
            (self.analysis.steps >= 2, "analysis.steps must be at least 2"),
            (0.0 <= self.analysis.lo_q < self.analysis.hi_q <= 1.0, "need 0 <= lo_q < hi_q <= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)
        return self

    @property
    def classifier_effective(self) -> ClassifierConfig:
        return dataclasses.replace(self.classifier, augment=self.distill.aug)


def _coerce(section, key: str, value):
    current = getattr(section, key)
    if isinstance(current, bool):
        if isinstance(value, str):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"{key}: expected a boolean, got {value!r}")
        return bool(value)
    if isinstance(current, tuple):
        items = value.split(",") if isinstance(value, str) else list(value)
        kind = type(current[0]) if current else int
        return tuple(kind(x) for x in items)
    if isinstance(current, int):
        if isinstance(value, float) and not value.is_integer():
            raise ValueError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(current, float):
        return float(value)
    return str(value)


# key -> what it mirrors; every config key must appear here
KEYS = {
    "data.window_ms": "window length 2L around the event midpoint (570 ms)",
    "data.image_size": "scalogram side length (64x64 images)",
    "data.f_min": "lowest scalogram frequency in Hz (10)",
    "data.f_max": "highest scalogram frequency in Hz (290)",
    "vae.image_size": "encoder input side length (64)",
    "vae.channels": "encoder stage widths",
    "vae.latent_dim": "latent dimension (16; ablation 8/32/64)",
    "vae.feature_channels": "frozen perceptual feature extractor widths",
    "vae.feature_seed": "seed of the frozen feature extractor",
    "vae.init_seed": "weight initialisation seed",
    "pretrain.epochs": "pre-training epochs (100)",
    "pretrain.batch_size": "pre-training batch size (512)",
    "pretrain.lr": "Adam learning rate (1e-3)",
    "pretrain.weight_decay": "Adam weight decay (1e-5)",
    "pretrain.beta_init": "initial KL weight beta (1.0)",
    "pretrain.beta_lr": "beta learning rate (1e-4)",
    "pretrain.per_subject_cap": "events sampled per subject per epoch (2,500)",
    "pretrain.perceptual_reduction": "perceptual distance reduction: sum (squared L2) or mean",
    "pretrain.seed": "pre-training sampling seed",
    "labels.n_restarts": "k-means restarts",
    "labels.max_iter": "Lloyd iteration cap",
    "labels.seed": "k-means seeding seed",
    "classifier.epochs": "classifier epochs (9)",
    "classifier.batch_size": "classifier batch size (4096)",
    "classifier.lr": "classifier learning rate (3e-4)",
    "classifier.weight_decay": "classifier weight decay (1e-5)",
    "classifier.hidden": "classifier hidden width",
    "classifier.augment": "overridden by distill.aug",
    "classifier.threshold": "decision threshold on the pathological probability (0.5)",
    "classifier.seed": "classifier init and surrogate seed",
    "distill.sd": "train the classification head (SD); off uses the weak labels directly",
    "distill.aug": "add the VAE-surrogate BCE term (AUG)",
    "folds.k": "cross-validation folds (5)",
    "folds.seed": "fold assignment seed",
    "folds.split_ratio": "train/val/test subjects per fold (119/30/36)",
    "analysis.steps": "interpolation steps per latent dimension (8)",
    "analysis.lo_q": "lower sweep quantile (0.001)",
    "analysis.hi_q": "upper sweep quantile (0.999)",
    "analysis.mixing_k": "neighbours for the knockout mixing score (10)",
}

PRESETS = {
    "paper": {},
    # few thousand events on one CPU: smaller batches give enough optimizer steps
    "desk": {
        "pretrain.epochs": 10,
        "pretrain.batch_size": 64,
        "classifier.batch_size": 64,
        "classifier.lr": 1e-3,
        "classifier.epochs": 9,
    },
}


def flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def load_config_file(path) -> dict:
    with open(path, "rb") as fh:
        raw = tomli.load(fh)
    preset = raw.pop("preset", None)
    flat = flatten(raw)
    unknown = sorted(set(flat) - set(KEYS))
    if unknown:
        raise ValueError(f"{path}: unknown config keys {unknown}")
    if preset is not None:
        flat = {"preset": preset, **flat}
    return flat


def build_config(preset: str | None = None, file: str | Path | None = None,
                 overrides: dict | None = None) -> RunConfig:
    """Defaults, then ``preset``, then ``file``, then ``overrides``."""
    file_values = load_config_file(file) if file is not None else {}
    preset = preset or file_values.pop("preset", None) or "paper"
    file_values.pop("preset", None)
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    cfg = RunConfig().replace(PRESETS[preset])
    cfg = cfg.replace(file_values)
    return cfg.replace(overrides or {})


def default_value(key: str):
    section, _, name = key.partition(".")
    v = getattr(getattr(RunConfig(), section), name)
    return ",".join(str(x) for x in v) if isinstance(v, tuple) else v
