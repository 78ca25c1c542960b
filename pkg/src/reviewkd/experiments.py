"""Experiment runners: the cross-stage supervision grid and the component
ablation ladder, with multi-seed aggregation and resumable on-disk records.

Each run persists as one JSON record (plus CSV of its epochs) named by its
place in the experiment; an interrupted experiment picks up where it stopped
by loading any record whose stored config digest still matches.  Full-scale
reference accuracies from long 240-epoch runs of the original-size models are
kept here as display-only orientation values for the reports.
"""

from __future__ import annotations

import json
import statistics
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from .core import (
    ConfigError,
    DistillConfig,
    RunRecord,
    TrainSchedule,
    config_hash,
)
from .data import DataBundle, synthetic_dataset
from .nets import build_net, build_pair
from .training import (
    DESK_SCHEDULE,
    load_checkpoint,
    save_checkpoint,
    train_distill,
    train_plain,
)

# Accuracies of full-length (240-epoch, full-width) runs, shown next to
# desk-scale numbers so readers can orient the trends.  Grid rows are student
# stages 1..4, columns teacher stages 1..4.
FULL_SCALE_GRID_REFERENCE = {
    "baseline": 69.1,
    "matrix": {
        (1, 1): 69.5, (1, 2): 69.0, (1, 3): 68.2, (1, 4): 66.3,
        (2, 1): 69.6, (2, 2): 69.6, (2, 3): 61.4, (2, 4): 61.1,
        (3, 1): 69.2, (3, 2): 69.8, (3, 3): 71.0, (3, 4): 50.4,
        (4, 1): 69.2, (4, 2): 69.3, (4, 3): 70.3, (4, 4): 70.3,
    },
}

# Same-source ablation ladder means, in ladder row order.
FULL_SCALE_ABLATION_REFERENCE = [74.3, 75.2, 75.6, 76.0, 75.8, 76.2]

# Ladder rows: which components are on, in the order they are added.
ABLATION_ROWS: list[tuple[str, ...]] = [
    (),
    ("RM",),
    ("RM", "RLF"),
    ("RM", "RLF", "ABF"),
    ("RM", "RLF", "HCL"),
    ("RM", "RLF", "ABF", "HCL"),
]

DEFAULT_PAIR = ("tiny-resnet-8", "tiny-wrn-40-2")
DEFAULT_LAMBDA = 4.0

#: Student-side schedule the runners use by default.  It is the desk recipe
#: plus a gradient-norm cap: distillation losses backprop through the fusion
#: chain, and at high loss weights an early outsized batch can otherwise tip
#: SGD momentum into divergence.  The cap leaves typical steps untouched.
EXPERIMENT_SCHEDULE = replace(DESK_SCHEDULE, clip_grad_norm=5.0)


@dataclass
class ExperimentSettings:
    """Everything a desk-scale experiment needs beyond the mechanism flags.

    The teacher trains on a larger draw of the same task (same prototypes,
    same test set) so it has genuinely better features to pass down; students
    see only the small draw.
    """

    student_arch: str = DEFAULT_PAIR[0]
    teacher_arch: str = DEFAULT_PAIR[1]
    classes: int = 8
    per_class: int = 64
    teacher_per_class: int = 256
    test_per_class: int = 64
    image_size: int = 16
    noise_scale: float = 2.5
    prototype_cells: int = 8
    data_seed: int = 0
    lambda_weight: float = DEFAULT_LAMBDA
    teacher_epochs: int = 30
    teacher_seed: int = 1_000
    teacher_dir: Optional[str] = None  # shared teacher cache across experiments

    def _bundle(self, per_class: int) -> DataBundle:
        return synthetic_dataset(
            classes=self.classes,
            per_class=per_class,
            size=self.image_size,
            seed=self.data_seed,
            test_per_class=self.test_per_class,
            noise_scale=self.noise_scale,
            prototype_cells=self.prototype_cells,
        )

    def bundle(self) -> DataBundle:
        return self._bundle(self.per_class)

    def teacher_bundle(self) -> DataBundle:
        return self._bundle(self.teacher_per_class)


@dataclass
class StageGridResult:
    """Mean accuracy per (student stage, teacher stage) cell, with failures
    kept as None, next to the plain-student baseline."""

    matrix: dict[tuple[int, int], Optional[float]]
    baseline: float
    repeats: int
    n_stages: int
    errors: dict[tuple[int, int], str] = field(default_factory=dict)

    @property
    def failed_cells(self) -> list[tuple[int, int]]:
        return sorted(k for k, v in self.matrix.items() if v is None)

    def to_dict(self) -> dict:
        return {
            "kind": "stage-grid",
            "matrix": {f"{i},{j}": v for (i, j), v in sorted(self.matrix.items())},
            "baseline": self.baseline,
            "repeats": self.repeats,
            "n_stages": self.n_stages,
            "errors": {f"{i},{j}": e for (i, j), e in sorted(self.errors.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StageGridResult":
        def key(s: str) -> tuple[int, int]:
            a, b = s.split(",")
            return int(a), int(b)

        return cls(
            matrix={key(k): v for k, v in d["matrix"].items()},
            baseline=d["baseline"],
            repeats=d["repeats"],
            n_stages=d["n_stages"],
            errors={key(k): v for k, v in d.get("errors", {}).items()},
        )


@dataclass
class AblationRow:
    flags: tuple[str, ...]
    mean: Optional[float]
    variance: Optional[float]
    accuracies: list[float] = field(default_factory=list)
    error: Optional[str] = None

    @property
    def label(self) -> str:
        return " + ".join(self.flags) if self.flags else "baseline"


@dataclass
class AblationResult:
    rows: list[AblationRow]
    repeats: int

    def to_dict(self) -> dict:
        return {
            "kind": "ablation",
            "repeats": self.repeats,
            "rows": [
                {
                    "flags": list(r.flags),
                    "mean": r.mean,
                    "variance": r.variance,
                    "accuracies": r.accuracies,
                    "error": r.error,
                }
                for r in self.rows
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AblationResult":
        rows = [
            AblationRow(
                flags=tuple(r["flags"]),
                mean=r["mean"],
                variance=r["variance"],
                accuracies=list(r.get("accuracies", [])),
                error=r.get("error"),
            )
            for r in d["rows"]
        ]
        return cls(rows=rows, repeats=d["repeats"])


def ablation_config(
    flags: tuple[str, ...], lambda_weight: float = DEFAULT_LAMBDA, seed: int = 0
) -> DistillConfig:
    """Map a ladder row's component set onto a mechanism config."""
    unknown = set(flags) - {"RM", "RLF", "ABF", "HCL"}
    if unknown:
        raise ConfigError(f"unknown ablation flags: {sorted(unknown)}")
    if "RLF" in flags and "RM" not in flags:
        raise ConfigError("RLF requires RM")
    if ("ABF" in flags or "HCL" in flags) and "RLF" not in flags:
        raise ConfigError("ABF/HCL require RLF")
    if "RLF" in flags:
        mechanism = "mkd_review_residual"
    elif "RM" in flags:
        mechanism = "mkd_review_naive"
    else:
        mechanism = "mkd"
    return DistillConfig(
        mechanism=mechanism,
        lambda_weight=lambda_weight,
        use_abf="ABF" in flags,
        use_hcl="HCL" in flags,
        seed=seed,
    )


def _mean_variance(values: list[float]) -> tuple[float, float]:
    mean = statistics.fmean(values)
    variance = statistics.variance(values) if len(values) > 1 else 0.0
    return mean, variance


def _load_if_current(path: Path, expected_hash: str) -> Optional[RunRecord]:
    """A stored record counts only if its config digest still matches."""
    if not path.is_file():
        return None
    try:
        record = RunRecord.load(path)
    except (json.JSONDecodeError, KeyError, TypeError):
        return None
    return record if record.config_hash == expected_hash else None


def _write_index(results_dir: Path, entries: dict[str, dict]) -> None:
    """Rewrite the experiment's index CSV atomically, sorted by run name."""
    lines = ["run,seed,config_hash,final_accuracy,record"]
    for name in sorted(entries):
        e = entries[name]
        lines.append(
            f"{name},{e['seed']},{e['config_hash']},{e['final_accuracy']},{e['record']}"
        )
    tmp = results_dir / "index.csv.tmp"
    tmp.write_text("\n".join(lines) + "\n")
    tmp.replace(results_dir / "index.csv")


class _RunStore:
    """Append-only per-run records under one experiment directory."""

    def __init__(self, results_dir: str | Path) -> None:
        self.dir = Path(results_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self._index: dict[str, dict] = {}

    def record_path(self, name: str) -> Path:
        return self.dir / f"{name}.json"

    def run(self, name: str, expected_hash: str, train_fn) -> RunRecord:
        """Return the stored record for ``name`` if it is current, else train
        and persist it."""
        path = self.record_path(name)
        record = _load_if_current(path, expected_hash)
        if record is None:
            record = train_fn()
            record.save(path)
        self._index[name] = {
            "seed": record.seed,
            "config_hash": record.config_hash,
            "final_accuracy": record.final_accuracy,
            "record": path.name,
        }
        _write_index(self.dir, self._index)
        return record


def prepare_teacher(
    settings: ExperimentSettings,
    store: _RunStore,
    schedule: Optional[TrainSchedule] = None,
):
    """Train (or reload) the frozen teacher shared by every cell.

    The teacher learns from the large draw of the task.  When
    ``settings.teacher_dir`` is set, the checkpoint lives there so several
    experiments can share one teacher.
    """
    if schedule is None:
        schedule = TrainSchedule(
            epochs=settings.teacher_epochs,
            base_lr=DESK_SCHEDULE.base_lr,
            lr_decay_factor=DESK_SCHEDULE.lr_decay_factor,
            decay_start_epoch=max(1, settings.teacher_epochs // 2),
            decay_every=max(1, settings.teacher_epochs // 4),
            batch_size=DESK_SCHEDULE.batch_size,
            weight_decay=DESK_SCHEDULE.weight_decay,
            momentum=DESK_SCHEDULE.momentum,
        )
    teacher_store = _RunStore(settings.teacher_dir) if settings.teacher_dir else store
    expected = config_hash(None, schedule, settings.teacher_seed)
    checkpoint = teacher_store.dir / "teacher.pt"
    record = _load_if_current(teacher_store.record_path("teacher"), expected)
    if record is not None and checkpoint.is_file():
        teacher, _ = load_checkpoint(checkpoint)
        return teacher, record
    teacher = build_net(
        settings.teacher_arch, classes=settings.classes, seed=settings.teacher_seed
    )
    record = train_plain(teacher, settings.teacher_bundle(), schedule, seed=settings.teacher_seed)
    record.save(teacher_store.record_path("teacher"))
    save_checkpoint(checkpoint, teacher, None, schedule, settings.teacher_seed)
    return teacher, record


def _baseline_runs(
    settings: ExperimentSettings,
    data: DataBundle,
    store: _RunStore,
    schedule: TrainSchedule,
    repeats: int,
) -> list[float]:
    values = []
    for r in range(repeats):
        seed = r
        expected = config_hash(None, schedule, seed)

        def train_fn(seed=seed):
            net = build_net(settings.student_arch, classes=settings.classes, seed=seed)
            return train_plain(net, data, schedule, seed=seed)

        record = store.run(f"baseline_seed{seed}", expected, train_fn)
        values.append(record.final_accuracy)
    return values


def run_stage_grid(
    pair: tuple[str, str] = DEFAULT_PAIR,
    schedule: Optional[TrainSchedule] = None,
    repeats: int = 3,
    results_dir: str | Path = "results/stage-grid",
    settings: Optional[ExperimentSettings] = None,
) -> StageGridResult:
    """Train one single-pair student per (student stage, teacher stage) cell,
    every combination including teacher stages above the student's, and
    compare each cell's mean accuracy with the plain-student baseline."""
    if settings is None:
        settings = ExperimentSettings()
    settings.student_arch, settings.teacher_arch = pair
    if schedule is None:
        schedule = EXPERIMENT_SCHEDULE
    student_probe, _ = build_pair(pair[0], pair[1], classes=settings.classes)
    n = student_probe.n_stages
    store = _RunStore(results_dir)
    data = settings.bundle()
    teacher, _ = prepare_teacher(settings, store)
    baseline_values = _baseline_runs(settings, data, store, schedule, repeats)
    baseline = statistics.fmean(baseline_values)

    matrix: dict[tuple[int, int], Optional[float]] = {}
    errors: dict[tuple[int, int], str] = {}
    for i in range(1, n + 1):
        for j in range(1, n + 1):
            values = []
            for r in range(repeats):
                seed = r
                config = DistillConfig(
                    mechanism="skd",
                    lambda_weight=settings.lambda_weight,
                    stage_pair=(i, j),
                    seed=seed,
                )
                expected = config_hash(config, schedule, seed)

                def train_fn(config=config):
                    student = build_net(
                        settings.student_arch, classes=settings.classes, seed=config.seed
                    )
                    return train_distill(student, teacher, config, data, schedule)

                try:
                    record = store.run(f"cell_s{i}_t{j}_seed{seed}", expected, train_fn)
                except Exception as exc:  # cell fails, grid continues
                    errors[(i, j)] = f"{type(exc).__name__}: {exc}"
                    break
                values.append(record.final_accuracy)
            matrix[(i, j)] = (
                statistics.fmean(values) if len(values) == repeats else None
            )
    result = StageGridResult(
        matrix=matrix,
        baseline=baseline,
        repeats=repeats,
        n_stages=n,
        errors=errors,
    )
    _save_summary(store.dir, result.to_dict())
    return result


def run_ablation(
    pair: tuple[str, str] = DEFAULT_PAIR,
    schedule: Optional[TrainSchedule] = None,
    repeats: int = 3,
    results_dir: str | Path = "results/ablation",
    settings: Optional[ExperimentSettings] = None,
) -> AblationResult:
    """Add the mechanism's components one at a time and measure each rung."""
    if settings is None:
        settings = ExperimentSettings()
    settings.student_arch, settings.teacher_arch = pair
    if schedule is None:
        schedule = EXPERIMENT_SCHEDULE
    store = _RunStore(results_dir)
    data = settings.bundle()
    teacher, _ = prepare_teacher(settings, store)

    rows = []
    for flags in ABLATION_ROWS:
        tag = "-".join(f.lower() for f in flags) if flags else "baseline"
        values: list[float] = []
        error: Optional[str] = None
        for r in range(repeats):
            seed = r
            config = ablation_config(flags, settings.lambda_weight, seed=seed)
            expected = config_hash(config, schedule, seed)

            def train_fn(config=config):
                student = build_net(
                    settings.student_arch, classes=settings.classes, seed=config.seed
                )
                return train_distill(student, teacher, config, data, schedule)

            try:
                record = store.run(f"row_{tag}_seed{seed}", expected, train_fn)
            except Exception as exc:
                error = f"{type(exc).__name__}: {exc}"
                break
            values.append(record.final_accuracy)
        if len(values) == repeats:
            mean, variance = _mean_variance(values)
            rows.append(AblationRow(flags, mean, variance, values))
        else:
            rows.append(AblationRow(flags, None, None, values, error=error))
    result = AblationResult(rows=rows, repeats=repeats)
    _save_summary(store.dir, result.to_dict())
    return result


def _save_summary(results_dir: Path, payload: dict) -> Path:
    path = results_dir / "summary.json"
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)
    return path


def load_summary(results_dir: str | Path):
    """Reload a finished experiment's result object from its directory."""
    path = Path(results_dir) / "summary.json"
    if not path.is_file():
        raise FileNotFoundError(f"no experiment summary at {path}")
    payload = json.loads(path.read_text())
    if payload.get("kind") == "stage-grid":
        return StageGridResult.from_dict(payload)
    if payload.get("kind") == "ablation":
        return AblationResult.from_dict(payload)
    raise ConfigError(f"unrecognized summary kind in {path}")
