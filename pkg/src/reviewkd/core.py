"""Shared data model: stage-indexed feature maps, run configuration, run records.

Everything here is a plain value type. Learned parameters live in `nets` and
`fusion`; this module only carries data between them and to disk.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import torch
import yaml

STUDENT = "student"
TEACHER = "teacher"

# Mechanisms understood by the losses and the training loop.  Single-pair
# mechanisms need an explicit (student_stage, teacher_stage) selection.
MECHANISMS = (
    "skd",
    "mkd",
    "skd_review",
    "mkd_review_naive",
    "mkd_review_residual",
)
SINGLE_PAIR_MECHANISMS = ("skd", "skd_review")

# Pyramid levels for the hierarchical context loss.  Levels larger than a
# feature's spatial size clamp down to it, so the leading 32 acts as the
# "no pooling" level for any feature up to 32x32.
DEFAULT_PYRAMID_LEVELS = (32, 4, 2, 1)


class ConfigError(ValueError):
    """A configuration invariant was violated."""


class ShapeMismatchError(ValueError):
    """Two arrays that must agree in shape do not."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during training."""


@dataclass
class FeatureMap:
    """One stage's activation map: (batch, channels, height, width) plus
    which network and stage it came from."""

    data: torch.Tensor
    stage: int
    source: str = STUDENT

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    def validate(self, n_stages: Optional[int] = None) -> "FeatureMap":
        if self.data.dim() != 4:
            raise ShapeMismatchError(
                f"feature map must be 4-D, got {self.data.dim()}-D"
            )
        if min(self.data.shape) < 1:
            raise ShapeMismatchError(f"all dimensions must be >= 1, got {self.shape}")
        if self.source not in (STUDENT, TEACHER):
            raise ConfigError(f"unknown source {self.source!r}")
        if self.stage < 1 or (n_stages is not None and self.stage > n_stages):
            raise ConfigError(f"stage {self.stage} out of range")
        if not torch.isfinite(self.data).all():
            raise ValueError(f"non-finite entries in stage-{self.stage} feature map")
        return self


@dataclass
class StageOutputs:
    """Per-stage features (ordered shallow to deep) plus final logits from one
    forward pass."""

    features: list[FeatureMap]
    logits: torch.Tensor

    @property
    def n_stages(self) -> int:
        return len(self.features)

    def feature(self, stage: int) -> FeatureMap:
        if not 1 <= stage <= self.n_stages:
            raise ConfigError(f"stage {stage} out of range 1..{self.n_stages}")
        return self.features[stage - 1]

    def validate(self) -> "StageOutputs":
        batch = self.logits.shape[0]
        prev_hw = (math.inf, math.inf)
        for k, fm in enumerate(self.features, start=1):
            fm.validate(n_stages=self.n_stages)
            if fm.stage != k:
                raise ConfigError(f"feature {k} carries stage index {fm.stage}")
            n, _, h, w = fm.shape
            if n != batch:
                raise ShapeMismatchError(
                    f"stage {k} batch {n} != logits batch {batch}"
                )
            if h > prev_hw[0] or w > prev_hw[1]:
                raise ShapeMismatchError(
                    f"spatial size grew from stage {k - 1} to {k}"
                )
            prev_hw = (h, w)
        if not torch.isfinite(self.logits).all():
            raise ValueError("non-finite logits")
        return self


@dataclass
class DistillConfig:
    """Mechanism toggles and weights for one distillation run."""

    mechanism: str = "mkd_review_residual"
    lambda_weight: float = 1.0
    use_abf: bool = True
    use_hcl: bool = True
    pyramid_levels: tuple[int, ...] = DEFAULT_PYRAMID_LEVELS
    stage_pair: Optional[tuple[int, int]] = None
    seed: int = 0

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["pyramid_levels"] = list(self.pyramid_levels)
        d["stage_pair"] = list(self.stage_pair) if self.stage_pair else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DistillConfig":
        kwargs = dict(d)
        if kwargs.get("pyramid_levels") is not None:
            kwargs["pyramid_levels"] = tuple(kwargs["pyramid_levels"])
        if kwargs.get("stage_pair") is not None:
            kwargs["stage_pair"] = tuple(kwargs["stage_pair"])
        return cls(**kwargs)


@dataclass
class TrainSchedule:
    """Epoch count, milestone learning-rate policy, and optimizer constants."""

    epochs: int = 20
    base_lr: float = 0.05
    lr_decay_factor: float = 0.1
    decay_start_epoch: int = 10
    decay_every: int = 5
    batch_size: int = 128
    weight_decay: float = 5e-4
    momentum: float = 0.9
    #: Optional cap on the global gradient norm per step (``None`` disables it).
    #: Distillation losses backprop through a chain of fusion modules, so a
    #: single large batch early in training can otherwise launch the momentum
    #: buffers into divergence.
    clip_grad_norm: float | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainSchedule":
        return cls(**d)


@dataclass
class EpochStats:
    epoch: int
    train_ce_loss: float
    distill_loss: float
    eval_accuracy: float

    def to_row(self) -> list:
        return [self.epoch, self.train_ce_loss, self.distill_loss, self.eval_accuracy]


@dataclass
class RunRecord:
    """Persisted result of one training run.

    `config` is None for plain (non-distilled) runs; the hash still covers the
    schedule and seed so paired runs remain distinguishable.
    """

    config: Optional[DistillConfig]
    schedule: TrainSchedule
    seed: int
    per_epoch: list[EpochStats] = field(default_factory=list)
    final_accuracy: float = 0.0
    wall_time_s: float = 0.0
    config_hash: str = ""

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict() if self.config else None,
            "schedule": self.schedule.to_dict(),
            "seed": self.seed,
            "per_epoch": [dataclasses.asdict(e) for e in self.per_epoch],
            "final_accuracy": self.final_accuracy,
            "wall_time_s": self.wall_time_s,
            "config_hash": self.config_hash,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(
            config=DistillConfig.from_dict(d["config"]) if d["config"] else None,
            schedule=TrainSchedule.from_dict(d["schedule"]),
            seed=d["seed"],
            per_epoch=[EpochStats(**e) for e in d["per_epoch"]],
            final_accuracy=d["final_accuracy"],
            wall_time_s=d["wall_time_s"],
            config_hash=d["config_hash"],
        )

    def save(self, path: str | Path) -> Path:
        """Write JSON next to a flat CSV of the per-epoch rows."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        csv_path = path.with_suffix(".csv")
        lines = ["epoch,train_ce_loss,distill_loss,eval_accuracy"]
        for e in self.per_epoch:
            lines.append(
                f"{e.epoch},{e.train_ce_loss!r},{e.distill_loss!r},{e.eval_accuracy!r}"
            )
        csv_path.write_text("\n".join(lines) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "RunRecord":
        return cls.from_dict(json.loads(Path(path).read_text()))


def config_hash(config: Optional[DistillConfig], schedule: TrainSchedule, seed: int) -> str:
    """Stable digest of (config, schedule, seed); identical inputs always map
    to the identical hash."""
    payload = {
        "config": config.to_dict() if config else None,
        "schedule": schedule.to_dict(),
        "seed": seed,
    }
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def validate_config(config: DistillConfig) -> DistillConfig:
    """Check every config invariant; raise ConfigError naming the first one
    violated, otherwise return the config unchanged."""
    if config.mechanism not in MECHANISMS:
        raise ConfigError(
            f"unknown mechanism {config.mechanism!r}; expected one of {MECHANISMS}"
        )
    if not (config.lambda_weight >= 0 and math.isfinite(config.lambda_weight)):
        raise ConfigError(f"lambda_weight must be >= 0, got {config.lambda_weight}")
    levels = tuple(config.pyramid_levels)
    if len(levels) == 0:
        raise ConfigError("pyramid_levels must be non-empty")
    if any(lv < 1 for lv in levels):
        raise ConfigError(f"pyramid_levels entries must be >= 1, got {levels}")
    if any(a <= b for a, b in zip(levels, levels[1:])):
        raise ConfigError(f"pyramid_levels not descending: {levels}")
    needs_pair = config.mechanism in SINGLE_PAIR_MECHANISMS
    if needs_pair and config.stage_pair is None:
        raise ConfigError(f"stage_pair required for mechanism {config.mechanism!r}")
    if not needs_pair and config.stage_pair is not None:
        raise ConfigError(
            f"stage_pair only valid for {SINGLE_PAIR_MECHANISMS}, "
            f"not {config.mechanism!r}"
        )
    if config.stage_pair is not None:
        i, j = config.stage_pair
        if i < 1 or j < 1:
            raise ConfigError(f"stage_pair entries must be >= 1, got {config.stage_pair}")
    if not isinstance(config.seed, int):
        raise ConfigError(f"seed must be an integer, got {type(config.seed).__name__}")
    return config


def validate_schedule(schedule: TrainSchedule) -> TrainSchedule:
    if schedule.epochs < 0:
        raise ConfigError(f"epochs must be >= 0, got {schedule.epochs}")
    if schedule.base_lr <= 0:
        raise ConfigError(f"base_lr must be > 0, got {schedule.base_lr}")
    if not 0 < schedule.lr_decay_factor < 1:
        raise ConfigError(
            f"lr_decay_factor must be in (0, 1), got {schedule.lr_decay_factor}"
        )
    if schedule.decay_start_epoch < 0:
        raise ConfigError(
            f"decay_start_epoch must be >= 0, got {schedule.decay_start_epoch}"
        )
    if schedule.decay_every < 1:
        raise ConfigError(f"decay_every must be >= 1, got {schedule.decay_every}")
    if schedule.batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {schedule.batch_size}")
    if schedule.weight_decay < 0:
        raise ConfigError(f"weight_decay must be >= 0, got {schedule.weight_decay}")
    if not 0 <= schedule.momentum < 1:
        raise ConfigError(f"momentum must be in [0, 1), got {schedule.momentum}")
    if schedule.clip_grad_norm is not None and schedule.clip_grad_norm <= 0:
        raise ConfigError(
            f"clip_grad_norm must be > 0 when set, got {schedule.clip_grad_norm}"
        )
    return schedule


_CONFIG_FIELDS = {f.name for f in dataclasses.fields(DistillConfig)}
_SCHEDULE_FIELDS = {f.name for f in dataclasses.fields(TrainSchedule)}


def load_config_file(path: str | Path) -> tuple[DistillConfig, TrainSchedule]:
    """Read the plain key-value config format (a YAML subset); keys mirror the
    DistillConfig / TrainSchedule field names exactly."""
    raw = yaml.safe_load(Path(path).read_text())
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} is not a key-value mapping")
    cfg_kwargs, sched_kwargs = {}, {}
    for key, value in raw.items():
        if key in _CONFIG_FIELDS:
            cfg_kwargs[key] = value
        elif key in _SCHEDULE_FIELDS:
            sched_kwargs[key] = value
        else:
            raise ConfigError(f"unknown config key {key!r} in {path}")
    config = DistillConfig.from_dict({**DistillConfig().to_dict(), **cfg_kwargs})
    schedule = TrainSchedule.from_dict({**TrainSchedule().to_dict(), **sched_kwargs})
    return validate_config(config), validate_schedule(schedule)


def save_config_file(
    path: str | Path, config: DistillConfig, schedule: TrainSchedule
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    merged = {**config.to_dict(), **schedule.to_dict()}
    lines = []
    for key in sorted(merged):
        lines.append(f"{key}: {json.dumps(merged[key])}")
    path.write_text("\n".join(lines) + "\n")
    return path
