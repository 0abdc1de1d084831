"""Dataclass configuration for models, losses, training, and runs.

All configs serialize to plain dicts (JSON-friendly) and back. ``from_dict``
is strict: unknown keys raise so typos in config files surface immediately.
Validation returns a list of human-readable problems instead of raising on
the first one, so the CLI can report every issue in a single pass.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Any

from .errors import ConfigurationError

BACKBONES = ("simple-cnn", "vgg16-like", "resnet50-like", "densenet201-like")
LOSS_REGIMES = ("CE", "ProtoPNet", "CIC", "PPIC")
OPTIMIZERS = ("sgd", "adam")


@dataclass
class ModelConfig:
    """Architecture hyperparameters: backbone, latent grid, prototype counts."""

    num_classes: int = 6
    prototypes_per_class: int = 3
    backbone_id: str = "simple-cnn"
    input_side: int = 224
    latent_depth: int = 128
    grid_w: int = 7
    grid_h: int = 7
    pretrained_weights: str | None = None

    @property
    def num_prototypes(self) -> int:
        return self.num_classes * self.prototypes_per_class

    def validate(self) -> list[str]:
        problems = []
        if self.backbone_id not in BACKBONES:
            problems.append(
                f"model.backbone_id: {self.backbone_id!r} not one of {BACKBONES}"
            )
        if self.grid_w < 1:
            problems.append("model.grid_w: must be >= 1")
        if self.grid_h < 1:
            problems.append("model.grid_h: must be >= 1")
        if self.latent_depth < 1:
            problems.append("model.latent_depth: must be >= 1")
        if self.num_classes < 2:
            problems.append("model.num_classes: must be >= 2")
        if self.prototypes_per_class < 1:
            problems.append("model.prototypes_per_class: must be >= 1")
        if self.input_side < 1:
            problems.append("model.input_side: must be >= 1")
        return problems


@dataclass
class SimilarityConfig:
    """Parameters of the distance-to-score transform and heatmap rendering."""

    epsilon: float = 1e-4
    heatmap_side: int | None = None  # None = model input_side
    bbox_percentile: float = 95.0

    def validate(self) -> list[str]:
        problems = []
        if not (self.epsilon > 0):
            problems.append("similarity.epsilon: must be > 0")
        if self.heatmap_side is not None and self.heatmap_side < 1:
            problems.append("similarity.heatmap_side: must be >= 1")
        if not (0 < self.bbox_percentile < 100):
            problems.append("similarity.bbox_percentile: must lie in (0, 100)")
        return problems


@dataclass
class ICNNConfig:
    """Neighborhood score parameters.

    ``neighborhood_size`` of None resolves to 2*M at the point of use, which
    is the default neighborhood of twice the per-class prototype count.
    """

    neighborhood_size: int | None = None
    exponent_p: float = 1.0
    exponent_q: float = 1.0
    exponent_r: float = 1.0
    log_floor: float = 1e-6

    def resolved_size(self, prototypes_per_class: int) -> int:
        if self.neighborhood_size is None:
            return 2 * prototypes_per_class
        return self.neighborhood_size

    def validate(self) -> list[str]:
        problems = []
        if self.neighborhood_size is not None and self.neighborhood_size < 2:
            problems.append("icnn.neighborhood_size: must be >= 2")
        if not (0 < self.log_floor < 1):
            problems.append("icnn.log_floor: must lie in (0, 1)")
        for name in ("exponent_p", "exponent_q", "exponent_r"):
            value = getattr(self, name)
            if not _finite(value):
                problems.append(f"icnn.{name}: must be finite")
        return problems


@dataclass
class LossWeights:
    """Component weights of the composite objectives."""

    w_ce: float = 1.0
    w_cls: float = 0.8
    w_sep: float = 0.08
    w_l1: float = 1e-4
    w_icnn: float = 1.0

    def validate(self) -> list[str]:
        problems = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if not _finite(value) or value < 0:
                problems.append(f"loss_weights.{f.name}: must be finite and >= 0")
        return problems


@dataclass
class TrainingConfig:
    """Cycle/epoch counts, optimizer settings, and loss-regime selection."""

    cycles: int = 3
    extractor_epochs: int = 10
    warmup_epochs: int = 5
    head_epochs: int = 20
    learning_rate: float = 0.01
    batch_size: int = 32
    loss_regime: str = "CIC"
    loss_weights: LossWeights = field(default_factory=LossWeights)
    icnn: ICNNConfig = field(default_factory=ICNNConfig)
    seed: int = 0
    optimizer: str = "sgd"
    selection_fraction: float = 0.1
    l1_head_only: bool = False

    def validate(self) -> list[str]:
        problems = []
        for name in ("cycles", "extractor_epochs", "warmup_epochs", "head_epochs",
                     "batch_size"):
            if getattr(self, name) < 1:
                problems.append(f"training.{name}: must be >= 1")
        if self.warmup_epochs >= self.extractor_epochs:
            problems.append(
                "training.warmup_epochs: must be < training.extractor_epochs"
            )
        if not (self.learning_rate > 0):
            problems.append("training.learning_rate: must be > 0")
        if self.loss_regime not in LOSS_REGIMES:
            problems.append(
                f"training.loss_regime: {self.loss_regime!r} not one of {LOSS_REGIMES}"
            )
        if self.optimizer not in OPTIMIZERS:
            problems.append(
                f"training.optimizer: {self.optimizer!r} not one of {OPTIMIZERS}"
            )
        if not (0 <= self.selection_fraction < 0.5):
            problems.append("training.selection_fraction: must lie in [0, 0.5)")
        problems += self.loss_weights.validate()
        problems += self.icnn.validate()
        return problems


@dataclass
class AugmentationPolicy:
    """Geometric augmentation set: one transform drawn per image, applied
    with ``apply_probability``. Setting the probability to 0 disables
    augmentation entirely."""

    apply_probability: float = 0.5
    rotation_degrees: float = 180.0
    perspective_distortion: float = 0.4
    scale_limit: float = 0.5
    translate_fraction: float = 0.2
    pad_max_px: int = 50
    seed: int | None = None  # None = derive from the training seed

    def validate(self) -> list[str]:
        problems = []
        if not (0 <= self.apply_probability <= 1):
            problems.append("augmentation.apply_probability: must lie in [0, 1]")
        if not (0 <= self.rotation_degrees <= 180):
            problems.append("augmentation.rotation_degrees: must lie in [0, 180]")
        if not (0 <= self.perspective_distortion < 1):
            problems.append("augmentation.perspective_distortion: must lie in [0, 1)")
        if not (0 <= self.scale_limit < 1):
            problems.append("augmentation.scale_limit: must lie in [0, 1)")
        if not (0 <= self.translate_fraction <= 0.5):
            problems.append("augmentation.translate_fraction: must lie in [0, 0.5]")
        if self.pad_max_px < 0:
            problems.append("augmentation.pad_max_px: must be >= 0")
        return problems


@dataclass
class DataConfig:
    """Dataset location and split parameters."""

    manifest: str | None = None
    train_fraction: float = 0.8

    def validate(self) -> list[str]:
        problems = []
        if not (0 < self.train_fraction <= 1):
            problems.append("data.train_fraction: must lie in (0, 1]")
        return problems


@dataclass
class RunConfig:
    """Top-level config: one section per subsystem plus dataset paths."""

    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    similarity: SimilarityConfig = field(default_factory=SimilarityConfig)
    augmentation: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    data: DataConfig = field(default_factory=DataConfig)
    output_dir: str = "runs/default"

    def validate(self) -> list[str]:
        problems = []
        problems += self.model.validate()
        problems += self.training.validate()
        problems += self.similarity.validate()
        problems += self.augmentation.validate()
        problems += self.data.validate()
        resolved = self.training.icnn.resolved_size(self.model.prototypes_per_class)
        if resolved > self.model.num_prototypes:
            problems.append(
                f"icnn.neighborhood_size: resolved value {resolved} exceeds the "
                f"prototype count {self.model.num_prototypes}"
            )
        if resolved < 2:
            problems.append("icnn.neighborhood_size: resolved value must be >= 2")
        return problems

    def heatmap_side(self) -> int:
        if self.similarity.heatmap_side is None:
            return self.model.input_side
        return self.similarity.heatmap_side


def _finite(x: Any) -> bool:
    try:
        return x == x and abs(float(x)) != float("inf")
    except (TypeError, ValueError):
        return False


def to_dict(cfg: Any) -> dict:
    """Recursively convert a config dataclass to a plain dict."""
    return dataclasses.asdict(cfg)


def _from_dict(cls: type, data: dict, path: str) -> Any:
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigurationError(f"{path}: unknown keys {unknown}")
    kwargs = {}
    for name in known:
        if name not in data:
            continue
        value = data[name]
        if name in _NESTED:
            kwargs[name] = _from_dict(_NESTED[name], value, f"{path}.{name}")
        else:
            kwargs[name] = value
    return cls(**kwargs)


_NESTED = {
    "model": ModelConfig,
    "training": TrainingConfig,
    "similarity": SimilarityConfig,
    "augmentation": AugmentationPolicy,
    "data": DataConfig,
    "loss_weights": LossWeights,
    "icnn": ICNNConfig,
}


def run_config_from_dict(data: dict) -> RunConfig:
    """Build a RunConfig from a parsed config mapping; strict about keys."""
    return _from_dict(RunConfig, data, "config")


def load_run_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
    return run_config_from_dict(data)


def dump_run_config(cfg: RunConfig, path: str | None = None) -> str:
    """Serialize to JSON; optionally write to ``path``. Returns the text."""
    text = json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n"
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    return text


def ensure_valid(cfg: RunConfig) -> None:
    """Raise ConfigurationError listing every validation problem at once."""
    problems = cfg.validate()
    if problems:
        raise ConfigurationError(
            "invalid configuration:\n" + "\n".join(f"  - {p}" for p in problems)
        )
