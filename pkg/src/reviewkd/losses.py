"""Distillation objectives.

Four families of feature supervision, all comparing (transformed) student
stage features against raw teacher stage features:

  * single-pair: one student stage vs one teacher stage;
  * same-level multi-stage: every stage vs its own level;
  * cross-stage review: a student stage vs every teacher stage at or below it,
    either one student stage at a time or across all stages (which visits
    n(n+1)/2 pairs);
  * residual fusion: the reviewed pairs collapsed to n distance terms by
    recursively fusing deeper student features before each comparison.

Plus the cross-entropy combination and a soft-logit baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import (
    STUDENT,
    TEACHER,
    ConfigError,
    DistillConfig,
    FeatureMap,
    ShapeMismatchError,
    StageOutputs,
)
from .fusion import ABF, HCL
from .nets import StageNet, StudentTransform

DEFAULT_KD_TEMPERATURE = 4.0
DEFAULT_KD_SOFT_WEIGHT = 0.9


@dataclass
class LossBreakdown:
    """Scalar loss terms kept as 0-d tensors so they stay differentiable."""

    total: torch.Tensor
    per_pair: dict[tuple[int, int], torch.Tensor] = field(default_factory=dict)
    ce: torch.Tensor = None  # type: ignore[assignment]
    distill: torch.Tensor = None  # type: ignore[assignment]

    def __post_init__(self):
        zero = self.total.detach() * 0
        if self.ce is None:
            self.ce = zero
        if self.distill is None:
            self.distill = self.total

    def per_teacher_stage(self) -> dict[int, torch.Tensor]:
        """Pair losses grouped and summed by teacher stage."""
        groups: dict[int, torch.Tensor] = {}
        for (_, j), value in self.per_pair.items():
            groups[j] = groups[j] + value if j in groups else value
        return groups


def _data(x: Union[FeatureMap, torch.Tensor]) -> torch.Tensor:
    return x.data if isinstance(x, FeatureMap) else x


def distance(a: Union[FeatureMap, torch.Tensor], b: Union[FeatureMap, torch.Tensor]) -> torch.Tensor:
    """Mean squared difference over all elements; zero iff the inputs agree."""
    ta, tb = _data(a), _data(b)
    if ta.shape != tb.shape:
        raise ShapeMismatchError(f"shapes differ: {tuple(ta.shape)} vs {tuple(tb.shape)}")
    return F.mse_loss(ta, tb)


def same_stage_pairs(n: int) -> list[tuple[int, int]]:
    return [(i, i) for i in range(1, n + 1)]


def review_pairs(n: int) -> list[tuple[int, int]]:
    """All (student stage i, teacher stage j) with j <= i, student-stage major."""
    return [(i, j) for i in range(1, n + 1) for j in range(1, i + 1)]


class TransformSet(nn.Module):
    """One shape-matching transform per (student stage, teacher stage) pair."""

    def __init__(self, transforms: dict[tuple[int, int], StudentTransform]) -> None:
        super().__init__()
        self._keys = list(transforms)
        self.modules_by_pair = nn.ModuleDict(
            {f"{i}-{j}": m for (i, j), m in transforms.items()}
        )

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return list(self._keys)

    def get(self, i: int, j: int) -> StudentTransform:
        key = f"{i}-{j}"
        if key not in self.modules_by_pair:
            raise ConfigError(f"no transform registered for pair ({i}, {j})")
        return self.modules_by_pair[key]

    def init_identity(self) -> "TransformSet":
        for m in self.modules_by_pair.values():
            m.init_identity()
        return self


def build_transforms(
    student: StageNet,
    teacher: StageNet,
    pairs: Iterable[tuple[int, int]],
    input_hw: tuple[int, int],
) -> TransformSet:
    """Transforms mapping student stage-i features to teacher stage-j shapes
    for a fixed input resolution."""
    transforms = {}
    for i, j in pairs:
        c_in = student.channels_per_stage[i - 1]
        c_out, h, w = teacher.stage_shape(j, input_hw)
        transforms[(i, j)] = StudentTransform(c_in, c_out, (h, w))
    return TransformSet(transforms)


def _check_stage(outputs: StageOutputs, i: int) -> None:
    if not 1 <= i <= outputs.n_stages:
        raise ConfigError(f"stage {i} out of range 1..{outputs.n_stages}")


def _check_same_depth(student: StageOutputs, teacher: StageOutputs) -> int:
    if student.n_stages != teacher.n_stages:
        raise ShapeMismatchError(
            f"stage counts differ: student {student.n_stages}, teacher {teacher.n_stages}"
        )
    return student.n_stages


def pair_loss(
    student: StageOutputs,
    teacher: StageOutputs,
    i: int,
    j: int,
    transforms: TransformSet,
) -> torch.Tensor:
    """Distance between the transformed student stage-i feature and the raw
    teacher stage-j feature."""
    _check_stage(student, i)
    _check_stage(teacher, j)
    projected = transforms.get(i, j)(student.feature(i).data)
    return distance(projected, teacher.feature(j).data)


def skd_loss(
    student: StageOutputs, teacher: StageOutputs, i: int, transforms: TransformSet
) -> LossBreakdown:
    """Single same-level pair: student stage i vs teacher stage i."""
    value = pair_loss(student, teacher, i, i, transforms)
    return LossBreakdown(total=value, per_pair={(i, i): value})


def mkd_loss(
    student: StageOutputs, teacher: StageOutputs, transforms: TransformSet
) -> LossBreakdown:
    """Sum of same-level pair losses over every stage."""
    n = _check_same_depth(student, teacher)
    per_pair = {}
    for i in range(1, n + 1):
        per_pair[(i, i)] = pair_loss(student, teacher, i, i, transforms)
    total = sum(per_pair.values())
    return LossBreakdown(total=total, per_pair=per_pair)


def skd_review_loss(
    student: StageOutputs, teacher: StageOutputs, i: int, transforms: TransformSet
) -> LossBreakdown:
    """Student stage i supervised by every teacher stage j <= i."""
    _check_stage(student, i)
    per_pair = {}
    for j in range(1, i + 1):
        per_pair[(i, j)] = pair_loss(student, teacher, i, j, transforms)
    total = sum(per_pair.values())
    return LossBreakdown(total=total, per_pair=per_pair)


def mkd_review_naive_loss(
    student: StageOutputs, teacher: StageOutputs, transforms: TransformSet
) -> LossBreakdown:
    """All n(n+1)/2 reviewed pairs, accumulated student-stage major."""
    n = _check_same_depth(student, teacher)
    per_pair = {}
    for i in range(1, n + 1):
        for j in range(1, i + 1):
            per_pair[(i, j)] = pair_loss(student, teacher, i, j, transforms)
    total = sum(per_pair.values())
    return LossBreakdown(total=total, per_pair=per_pair)


def mkd_review_reordered_loss(
    student: StageOutputs, teacher: StageOutputs, transforms: TransformSet
) -> LossBreakdown:
    """The same pair set accumulated teacher-stage major: for each teacher
    stage j, every student stage i >= j.  Totals match the naive order up to
    floating-point association."""
    n = _check_same_depth(student, teacher)
    per_pair = {}
    total = None
    for j in range(1, n + 1):
        for i in range(j, n + 1):
            value = pair_loss(student, teacher, i, j, transforms)
            per_pair[(i, j)] = value
            total = value if total is None else total + value
    return LossBreakdown(total=total, per_pair=per_pair)


class ResidualFusers(nn.Module):
    """Trainable pieces of the residual recursion: the deepest-stage transform
    plus one fuser per remaining stage (indexed by the stage it fuses into)."""

    def __init__(self, base: StudentTransform, fusers: list[ABF]) -> None:
        super().__init__()
        self.base = base
        self.fusers = nn.ModuleList(fusers)

    @property
    def n_stages(self) -> int:
        return len(self.fusers) + 1

    def fuser_for_stage(self, j: int) -> ABF:
        return self.fusers[j - 1]


def build_residual_fusers(
    student: StageNet,
    teacher: StageNet,
    input_hw: tuple[int, int],
    attention: bool = True,
) -> ResidualFusers:
    """Fusion chain for a student/teacher pair at a fixed input resolution.

    The fused feature travels at a single mid channel count — the teacher's
    deepest-stage width, which is also where the chain starts — so each step's
    output can feed the next without reprojection.
    """
    n = student.n_stages
    if teacher.n_stages != n:
        raise ConfigError("student and teacher must have equal stage counts")
    mid = teacher.channels_per_stage[-1]
    c_out, h, w = teacher.stage_shape(n, input_hw)
    base = StudentTransform(student.channels_per_stage[-1], c_out, (h, w))
    fusers = [
        ABF(
            in_channels=student.channels_per_stage[j - 1],
            mid_channels=mid,
            out_channels=teacher.channels_per_stage[j - 1],
            attention=attention,
        )
        for j in range(1, n)
    ]
    return ResidualFusers(base, fusers)


def mkd_review_residual_loss(
    student: StageOutputs,
    teacher: StageOutputs,
    fusers: ResidualFusers,
    hcl: Optional[HCL] = None,
) -> LossBreakdown:
    """Residual-fusion objective: compare the deepest student feature against
    the deepest teacher stage, then walk shallower one stage at a time, fusing
    the running deep feature into each student stage before comparing it with
    the teacher stage at that level.  Exactly n distance terms.
    """
    n = _check_same_depth(student, teacher)
    if fusers.n_stages != n:
        raise ConfigError(
            f"fuser chain built for {fusers.n_stages} stages, networks have {n}"
        )
    dist: Callable[[torch.Tensor, torch.Tensor], torch.Tensor] = hcl if hcl is not None else distance
    per_pair: dict[tuple[int, int], torch.Tensor] = {}
    fused = fusers.base(student.feature(n).data)
    target = teacher.feature(n).data
    if fused.shape != target.shape:
        raise ShapeMismatchError(
            f"deepest transformed feature {tuple(fused.shape)} vs teacher {tuple(target.shape)}"
        )
    per_pair[(n, n)] = dist(fused, target)
    for j in range(n - 1, 0, -1):
        out, fused = fusers.fuser_for_stage(j)(student.feature(j).data, fused)
        target = teacher.feature(j).data
        if out.shape != target.shape:
            raise ShapeMismatchError(
                f"fused stage-{j} output {tuple(out.shape)} vs teacher {tuple(target.shape)}"
            )
        per_pair[(j, j)] = dist(out, target)
    total = sum(per_pair.values())
    return LossBreakdown(total=total, per_pair=per_pair)


def total_loss(
    logits: torch.Tensor,
    labels: torch.Tensor,
    distill: Union[LossBreakdown, torch.Tensor],
    lambda_weight: float,
) -> LossBreakdown:
    """Cross-entropy plus the weighted distillation term."""
    if lambda_weight < 0:
        raise ConfigError(f"lambda_weight must be >= 0, got {lambda_weight}")
    classes = logits.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= classes):
        raise ConfigError(f"label out of class range [0, {classes})")
    ce = F.cross_entropy(logits, labels)
    if isinstance(distill, LossBreakdown):
        distill_value, per_pair = distill.total, dict(distill.per_pair)
    else:
        distill_value, per_pair = distill, {}
    total = ce if lambda_weight == 0 else ce + lambda_weight * distill_value
    return LossBreakdown(total=total, per_pair=per_pair, ce=ce, distill=distill_value)


def kd_logit_loss(
    student_logits: torch.Tensor,
    teacher_logits: torch.Tensor,
    temperature: float = DEFAULT_KD_TEMPERATURE,
) -> torch.Tensor:
    """Temperature-softened KL between teacher and student output
    distributions, scaled by temperature squared."""
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    if student_logits.shape != teacher_logits.shape:
        raise ShapeMismatchError(
            f"logit shapes differ: {tuple(student_logits.shape)} vs "
            f"{tuple(teacher_logits.shape)}"
        )
    log_p_student = F.log_softmax(student_logits / temperature, dim=-1)
    p_teacher = F.softmax(teacher_logits / temperature, dim=-1)
    return F.kl_div(log_p_student, p_teacher, reduction="batchmean") * temperature**2


class DistillModules(nn.Module):
    """All trainable auxiliary modules a mechanism needs, built from config.

    Owns either a transform set (pairwise mechanisms) or a fuser chain
    (residual mechanism), plus the pyramid distance when enabled.
    """

    def __init__(
        self,
        mechanism: str,
        transforms: Optional[TransformSet] = None,
        fusers: Optional[ResidualFusers] = None,
        hcl: Optional[HCL] = None,
        stage_pair: Optional[tuple[int, int]] = None,
    ) -> None:
        super().__init__()
        self.mechanism = mechanism
        self.transforms = transforms
        self.fusers = fusers
        self.hcl = hcl
        self.stage_pair = stage_pair

    @classmethod
    def from_config(
        cls,
        config: DistillConfig,
        student: StageNet,
        teacher: StageNet,
        input_hw: tuple[int, int],
    ) -> "DistillModules":
        n = student.n_stages
        if config.mechanism == "mkd_review_residual":
            fusers = build_residual_fusers(
                student, teacher, input_hw, attention=config.use_abf
            )
            hcl = HCL(config.pyramid_levels) if config.use_hcl else None
            return cls(config.mechanism, fusers=fusers, hcl=hcl)
        if config.mechanism in ("skd", "skd_review"):
            i, j = config.stage_pair if config.stage_pair else (n, n)
            if config.mechanism == "skd":
                pairs = [(i, j)]
            else:
                pairs = [(i, k) for k in range(1, i + 1)]
        elif config.mechanism == "mkd":
            pairs = same_stage_pairs(n)
        elif config.mechanism == "mkd_review_naive":
            pairs = review_pairs(n)
        else:
            raise ConfigError(f"unknown mechanism: {config.mechanism!r}")
        transforms = build_transforms(student, teacher, pairs, input_hw)
        return cls(config.mechanism, transforms=transforms, stage_pair=config.stage_pair)

    def loss(self, student: StageOutputs, teacher: StageOutputs) -> LossBreakdown:
        if self.mechanism == "mkd_review_residual":
            return mkd_review_residual_loss(student, teacher, self.fusers, self.hcl)
        if self.mechanism == "skd":
            i, j = self.stage_pair if self.stage_pair else (student.n_stages,) * 2
            value = pair_loss(student, teacher, i, j, self.transforms)
            return LossBreakdown(total=value, per_pair={(i, j): value})
        if self.mechanism == "skd_review":
            i = self.stage_pair[0] if self.stage_pair else student.n_stages
            return skd_review_loss(student, teacher, i, self.transforms)
        if self.mechanism == "mkd":
            return mkd_loss(student, teacher, self.transforms)
        if self.mechanism == "mkd_review_naive":
            return mkd_review_naive_loss(student, teacher, self.transforms)
        raise ConfigError(f"unknown mechanism: {self.mechanism!r}")


def kd_baseline_loss(
    student_logits: torch.Tensor,
    teacher_logits: torch.Tensor,
    labels: torch.Tensor,
    temperature: float = DEFAULT_KD_TEMPERATURE,
    soft_weight: float = DEFAULT_KD_SOFT_WEIGHT,
) -> LossBreakdown:
    """Classic soft-label baseline: weighted mix of cross-entropy and the
    softened-logit term."""
    ce = F.cross_entropy(student_logits, labels)
    soft = kd_logit_loss(student_logits, teacher_logits, temperature)
    total = (1.0 - soft_weight) * ce + soft_weight * soft
    return LossBreakdown(total=total, ce=ce, distill=soft)
