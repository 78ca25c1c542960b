"""Optimization harness.

One inner loop serves both plain and distilled training; the distilled path
adds a frozen-teacher forward and the auxiliary-module parameters to the
optimizer.  Everything that consumes randomness is seeded explicitly, so a
run is a pure function of (nets, config, schedule, seed) on a single thread.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn

from .core import (
    ConfigError,
    DistillConfig,
    EpochStats,
    RunRecord,
    TrainingDiverged,
    TrainSchedule,
    config_hash,
    validate_config,
)
from .data import DataBundle, Dataset
from .losses import DistillModules, total_loss
from .nets import ARCHITECTURES, StageNet, build_net

# Full-length schedule: 240 epochs from 0.1, tenfold drops every 30 epochs
# once the first 150 are done, batches of 128.
PAPER_SCHEDULE = TrainSchedule(
    epochs=240,
    base_lr=0.1,
    lr_decay_factor=0.1,
    decay_start_epoch=150,
    decay_every=30,
    batch_size=128,
    weight_decay=5e-4,
    momentum=0.9,
)

# Desk-scale default: minutes on one CPU core, same shape of decay curve.
DESK_SCHEDULE = TrainSchedule(
    epochs=20,
    base_lr=0.05,
    lr_decay_factor=0.1,
    decay_start_epoch=10,
    decay_every=5,
    batch_size=128,
    weight_decay=5e-4,
    momentum=0.9,
)

_AUX_SEED_OFFSET = 7_001  # keeps auxiliary-module init off the net-init stream


@dataclass
class TrainerState:
    """Mutable bookkeeping for one loop."""

    epoch: int = 0
    current_lr: float = 0.0
    best_accuracy: float = 0.0


def lr_at_epoch(schedule: TrainSchedule, epoch: int) -> float:
    """Piecewise-constant rate: base until the first decay epoch, then one
    extra tenfold (or configured factor) drop at every following interval."""
    if not 0 <= epoch < schedule.epochs:
        raise ConfigError(
            f"epoch {epoch} out of range [0, {schedule.epochs})"
        )
    if epoch < schedule.decay_start_epoch:
        k = 0
    else:
        k = 1 + (epoch - schedule.decay_start_epoch) // schedule.decay_every
    return schedule.base_lr * schedule.lr_decay_factor**k


def parameter_checksum(net: nn.Module) -> str:
    """Digest over every parameter and buffer, in state-dict order."""
    h = hashlib.sha256()
    for key, tensor in sorted(net.state_dict().items()):
        h.update(key.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def forward_trace(net: StageNet, images: torch.Tensor) -> list[torch.Tensor]:
    """Every stage feature plus the logits for one forward pass — the full
    observable computation of the deployed network."""
    net.eval()
    with torch.no_grad():
        outputs = net.forward_with_stages(images)
    return [f.data for f in outputs.features] + [outputs.logits]


def evaluate(net: nn.Module, data: Dataset, batch_size: int = 256) -> float:
    """Top-1 accuracy percentage; never shuffles, never augments."""
    if len(data) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    net.eval()
    correct = 0
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            images = data.images[start : start + batch_size]
            labels = data.labels[start : start + batch_size]
            predictions = net(images).argmax(dim=-1)
            correct += int((predictions == labels).sum())
    return 100.0 * correct / len(data)


def save_checkpoint(
    path: str | Path,
    net: StageNet,
    config: Optional[DistillConfig],
    schedule: TrainSchedule,
    seed: int,
    modules: Optional[DistillModules] = None,
) -> None:
    """Parameter arrays plus the config digest (and arch so it can rebuild)."""
    payload = {
        "arch": net.name,
        "classes": net.classifier.out_features,
        "state": net.state_dict(),
        "config": config.to_dict() if config else None,
        "schedule": schedule.to_dict(),
        "seed": seed,
        "config_hash": config_hash(config, schedule, seed),
    }
    if modules is not None:
        payload["aux_state"] = modules.state_dict()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path: str | Path, net: Optional[StageNet] = None) -> tuple[StageNet, dict]:
    """Rebuild (or fill) a network from a checkpoint; returns it with the
    stored metadata."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if net is None:
        if payload["arch"] not in ARCHITECTURES:
            raise ConfigError(f"checkpoint for unknown architecture {payload['arch']!r}")
        net = build_net(payload["arch"], classes=payload["classes"])
    net.load_state_dict(payload["state"])
    return net, payload


def _train(
    student: StageNet,
    data: DataBundle,
    schedule: TrainSchedule,
    seed: int,
    config: Optional[DistillConfig] = None,
    teacher: Optional[StageNet] = None,
    modules: Optional[DistillModules] = None,
    checkpoint_dir: Optional[str | Path] = None,
) -> RunRecord:
    """Shared inner loop.  With no modules this is plain cross-entropy; with
    modules it adds the frozen-teacher distillation term."""
    started = time.monotonic()
    lambda_weight = config.lambda_weight if config else 0.0
    params = list(student.parameters())
    if modules is not None:
        params += list(modules.parameters())
    optimizer = torch.optim.SGD(
        params,
        lr=schedule.base_lr,
        momentum=schedule.momentum,
        weight_decay=schedule.weight_decay,
    )
    state = TrainerState(best_accuracy=evaluate(student, data.test))
    per_epoch: list[EpochStats] = []
    if checkpoint_dir is not None:
        best_path = Path(checkpoint_dir) / "best.pt"
        save_checkpoint(best_path, student, config, schedule, seed, modules)
    for epoch in range(schedule.epochs):
        state.epoch = epoch
        state.current_lr = lr_at_epoch(schedule, epoch)
        for group in optimizer.param_groups:
            group["lr"] = state.current_lr
        student.train()
        if modules is not None:
            modules.train()
        ce_sum = 0.0
        distill_sum = 0.0
        batch_count = 0
        for step, batch in enumerate(
            data.train.batches(schedule.batch_size, seed=seed, epoch=epoch)
        ):
            optimizer.zero_grad()
            if modules is not None:
                student_out = student.forward_with_stages(batch.images)
                with torch.no_grad():
                    teacher_out = teacher.forward_with_stages(batch.images)
                breakdown = total_loss(
                    student_out.logits,
                    batch.labels,
                    modules.loss(student_out, teacher_out),
                    lambda_weight,
                )
            else:
                logits = student(batch.images)
                breakdown = total_loss(logits, batch.labels, torch.zeros(()), 0.0)
            if not torch.isfinite(breakdown.total):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, step {step}"
                )
            breakdown.total.backward()
            if schedule.clip_grad_norm is not None:
                torch.nn.utils.clip_grad_norm_(params, schedule.clip_grad_norm)
            optimizer.step()
            ce_sum += float(breakdown.ce.detach())
            distill_sum += float(breakdown.distill.detach())
            batch_count += 1
        accuracy = evaluate(student, data.test)
        per_epoch.append(
            EpochStats(
                epoch=epoch,
                train_ce_loss=ce_sum / max(batch_count, 1),
                distill_loss=distill_sum / max(batch_count, 1),
                eval_accuracy=accuracy,
            )
        )
        if accuracy >= state.best_accuracy:
            state.best_accuracy = accuracy
            if checkpoint_dir is not None:
                save_checkpoint(best_path, student, config, schedule, seed, modules)
    final_accuracy = (
        per_epoch[-1].eval_accuracy if per_epoch else evaluate(student, data.test)
    )
    return RunRecord(
        config=config,
        schedule=schedule,
        seed=seed,
        per_epoch=per_epoch,
        final_accuracy=final_accuracy,
        wall_time_s=time.monotonic() - started,
        config_hash=config_hash(config, schedule, seed),
    )


def train_plain(
    net: StageNet,
    data: DataBundle,
    schedule: TrainSchedule = DESK_SCHEDULE,
    seed: int = 0,
    checkpoint_dir: Optional[str | Path] = None,
) -> RunRecord:
    """Cross-entropy-only training."""
    return _train(net, data, schedule, seed, checkpoint_dir=checkpoint_dir)


def train_distill(
    student: StageNet,
    teacher: StageNet,
    config: DistillConfig,
    data: DataBundle,
    schedule: TrainSchedule = DESK_SCHEDULE,
    checkpoint_dir: Optional[str | Path] = None,
) -> RunRecord:
    """Distilled training against a frozen teacher.

    With ``lambda_weight == 0`` no auxiliary modules are built and the teacher
    is never consulted, so the run is step-for-step identical to
    ``train_plain`` at the same seed.
    """
    validate_config(config)
    teacher.eval()
    teacher.requires_grad_(False)
    before = parameter_checksum(teacher)
    if config.lambda_weight > 0:
        with torch.random.fork_rng():
            torch.manual_seed(config.seed + _AUX_SEED_OFFSET)
            modules = DistillModules.from_config(
                config, student, teacher, data.train.image_hw
            )
        record = _train(
            student,
            data,
            schedule,
            config.seed,
            config=config,
            teacher=teacher,
            modules=modules,
            checkpoint_dir=checkpoint_dir,
        )
    else:
        record = _train(
            student, data, schedule, config.seed, config=config,
            checkpoint_dir=checkpoint_dir,
        )
    after = parameter_checksum(teacher)
    if before != after:
        raise TrainingDiverged("teacher parameters changed during distillation")
    return record
