"""Stage-partitioned convolutional networks and the student-side transform
that maps a student feature onto a teacher feature's shape.

A stage is everything up to (but not including) the next spatial downsampling
layer; the final stage ends before global pooling.  Networks expose one
feature map per stage plus the classifier logits.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import (
    STUDENT,
    ConfigError,
    FeatureMap,
    ShapeMismatchError,
    StageOutputs,
)


class BasicBlock(nn.Module):
    """Post-activation residual block (two 3x3 convs, projection shortcut on
    shape change)."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1) -> None:
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class PreActBlock(nn.Module):
    """Pre-activation residual block used by the wide variants."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1) -> None:
        super().__init__()
        self.bn1 = nn.BatchNorm2d(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False)
        else:
            self.shortcut = nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.relu(self.bn1(x))
        shortcut = self.shortcut(out if not isinstance(self.shortcut, nn.Identity) else x)
        out = self.conv1(out)
        out = self.conv2(F.relu(self.bn2(out)))
        return out + shortcut


class StageNet(nn.Module):
    """A classifier split into sequential stages separated by downsampling.

    `stages[k]` maps the previous feature to the stage-(k+1) feature;
    `classifier` is global average pooling plus a linear head.
    """

    def __init__(
        self,
        name: str,
        stages: Sequence[nn.Module],
        channels_per_stage: Sequence[int],
        downsample_factor_per_stage: Sequence[int],
        classes: int,
    ) -> None:
        super().__init__()
        if not (len(stages) == len(channels_per_stage) == len(downsample_factor_per_stage)):
            raise ConfigError("per-stage metadata lengths disagree")
        self.name = name
        self.stages = nn.ModuleList(stages)
        self.channels_per_stage = list(channels_per_stage)
        self.downsample_factor_per_stage = list(downsample_factor_per_stage)
        self.classes = classes
        self.classifier = nn.Linear(channels_per_stage[-1], classes)

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    @property
    def total_downsample(self) -> int:
        total = 1
        for f in self.downsample_factor_per_stage:
            total *= f
        return total

    def stage_shape(self, stage: int, input_hw: tuple[int, int]) -> tuple[int, int, int]:
        """(channels, height, width) of the given stage's output for an input
        of the given spatial size."""
        h, w = input_hw
        for f in self.downsample_factor_per_stage[:stage]:
            h //= f
            w //= f
        return self.channels_per_stage[stage - 1], h, w

    def forward_with_stages(self, batch: torch.Tensor, source: str = STUDENT) -> StageOutputs:
        """Run all stages, returning every stage feature plus the logits."""
        if batch.dim() != 4:
            raise ShapeMismatchError(f"expected 4-D input, got {batch.dim()}-D")
        h, w = batch.shape[-2:]
        total = self.total_downsample
        if h % total or w % total:
            raise ShapeMismatchError(
                f"input spatial size {h}x{w} not divisible by "
                f"cumulative downsample factor {total}"
            )
        features = []
        x = batch
        for k, stage in enumerate(self.stages, start=1):
            x = stage(x)
            features.append(FeatureMap(x, stage=k, source=source))
        logits = self.classifier(F.adaptive_avg_pool2d(x, 1).flatten(1))
        return StageOutputs(features=features, logits=logits)

    def forward(self, batch: torch.Tensor) -> torch.Tensor:
        return self.forward_with_stages(batch).logits


def _stack(block: type, in_ch: int, out_ch: int, blocks: int, stride: int) -> nn.Sequential:
    layers = [block(in_ch, out_ch, stride)]
    for _ in range(blocks - 1):
        layers.append(block(out_ch, out_ch, 1))
    return nn.Sequential(*layers)


def _resnet(
    name: str,
    blocks: Sequence[int],
    widths: Sequence[int],
    classes: int,
    block: type = BasicBlock,
    in_channels: int = 3,
) -> StageNet:
    # Stem convolution keeps full resolution, so it belongs to stage 1.
    stem = nn.Sequential(
        nn.Conv2d(in_channels, widths[0], 3, padding=1, bias=False),
        nn.BatchNorm2d(widths[0]),
        nn.ReLU(inplace=True),
    )
    stages = []
    downsample = []
    prev = widths[0]
    for k, (b, ch) in enumerate(zip(blocks, widths)):
        stride = 1 if k == 0 else 2
        stack = _stack(block, prev, ch, b, stride)
        stages.append(nn.Sequential(stem, stack) if k == 0 else stack)
        downsample.append(stride)
        prev = ch
    return StageNet(name, stages, widths, downsample, classes)


class _IdentityStage(nn.Module):
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x


def make_identity_net(n_stages: int, channels: int = 3, classes: int = 4) -> StageNet:
    """Degenerate network whose stages all pass the input through unchanged.

    Every stage feature equals the input, so any two structurally identical
    copies produce equal features at every stage; useful for nullity checks.
    """
    stages = [_IdentityStage() for _ in range(n_stages)]
    return StageNet(
        f"identity-{n_stages}",
        stages,
        [channels] * n_stages,
        [1] * n_stages,
        classes,
    )


def _tiny_resnet(name: str, blocks_per_stage: int, classes: int) -> StageNet:
    b = blocks_per_stage
    return _resnet(name, [b] * 4, [4, 8, 16, 32], classes)

def _tiny_wrn(name: str, blocks_per_stage: int, widen: int, classes: int) -> StageNet:
    widths = [4 * widen, 8 * widen, 16 * widen, 32 * widen]
    return _resnet(name, [blocks_per_stage] * 4, widths, classes, block=PreActBlock)


ARCHITECTURES: dict[str, Callable[[int], StageNet]] = {
    # Desk-scale four-stage variants: full-width channels divided by 4.
    "tiny-resnet-8": lambda classes: _tiny_resnet("tiny-resnet-8", 1, classes),
    "tiny-resnet-26": lambda classes: _tiny_resnet("tiny-resnet-26", 3, classes),
    "tiny-wrn-16-1": lambda classes: _tiny_wrn("tiny-wrn-16-1", 1, 1, classes),
    "tiny-wrn-16-2": lambda classes: _tiny_wrn("tiny-wrn-16-2", 1, 2, classes),
    "tiny-wrn-40-1": lambda classes: _tiny_wrn("tiny-wrn-40-1", 3, 1, classes),
    "tiny-wrn-40-2": lambda classes: _tiny_wrn("tiny-wrn-40-2", 3, 2, classes),
    "tiny-wrn-3stage": lambda classes: _resnet(
        "tiny-wrn-3stage", [1, 1, 1], [4, 8, 16], classes, block=PreActBlock
    ),
    # Full-width four-stage models for long CIFAR runs; block counts chosen so
    # 2 + 2*sum(blocks) matches the depth in the name.
    "resnet20": lambda classes: _resnet("resnet20", [3, 2, 2, 2], [16, 32, 64, 128], classes),
    "resnet56": lambda classes: _resnet("resnet56", [7, 7, 7, 6], [16, 32, 64, 128], classes),
    "wrn16-2": lambda classes: _resnet(
        "wrn16-2", [2, 2, 2, 1], [32, 64, 128, 256], classes, block=PreActBlock
    ),
    "wrn40-1": lambda classes: _resnet(
        "wrn40-1", [5, 5, 5, 4], [16, 32, 64, 128], classes, block=PreActBlock
    ),
    "wrn40-2": lambda classes: _resnet(
        "wrn40-2", [5, 5, 5, 4], [32, 64, 128, 256], classes, block=PreActBlock
    ),
}


@contextlib.contextmanager
def _seeded(seed: Optional[int]):
    if seed is None:
        yield
    else:
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            yield


def build_net(arch: str, classes: int = 100, seed: Optional[int] = None) -> StageNet:
    if arch not in ARCHITECTURES:
        known = ", ".join(sorted(ARCHITECTURES))
        raise ConfigError(f"unknown architecture {arch!r}; known: {known}")
    with _seeded(seed):
        return ARCHITECTURES[arch](classes)


def build_pair(
    student_arch: str,
    teacher_arch: str,
    classes: int = 100,
    seed: Optional[int] = None,
) -> tuple[StageNet, StageNet]:
    """Student and teacher networks; both must expose the same stage count."""
    student = build_net(student_arch, classes, seed=seed)
    teacher = build_net(teacher_arch, classes, seed=None if seed is None else seed + 1)
    if student.n_stages != teacher.n_stages:
        raise ConfigError(
            f"stage counts differ: {student_arch} has {student.n_stages}, "
            f"{teacher_arch} has {teacher.n_stages}"
        )
    return student, teacher


def list_archs(classes: int = 100) -> list[tuple[str, int, int]]:
    """(name, stage count, parameter count) for every registered architecture."""
    rows = []
    for name in sorted(ARCHITECTURES):
        net = build_net(name, classes, seed=0)
        params = sum(p.numel() for p in net.parameters())
        rows.append((name, net.n_stages, params))
    return rows


class StudentTransform(nn.Module):
    """1x1 convolution + batch norm mapping student channels to teacher
    channels, then nearest-neighbor resize to the teacher's spatial size.

    `init_identity` makes the module an exact pass-through in eval mode when
    source and target shapes already agree.
    """

    def __init__(self, in_channels: int, out_channels: int, target_hw: tuple[int, int]) -> None:
        super().__init__()
        if target_hw[0] < 1 or target_hw[1] < 1:
            raise ShapeMismatchError(f"target spatial size {target_hw} below 1x1")
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size=1)
        self.bn = nn.BatchNorm2d(out_channels)
        self.target_hw = (int(target_hw[0]), int(target_hw[1]))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.bn(self.conv(x))
        if out.shape[-2:] != self.target_hw:
            out = F.interpolate(out, size=self.target_hw, mode="nearest")
        return out

    @torch.no_grad()
    def init_identity(self) -> "StudentTransform":
        if self.conv.in_channels != self.conv.out_channels:
            raise ConfigError("identity init needs matching channel counts")
        self.conv.weight.zero_()
        for c in range(self.conv.out_channels):
            self.conv.weight[c, c, 0, 0] = 1.0
        self.conv.bias.zero_()
        self.bn.weight.fill_(1.0)
        self.bn.bias.zero_()
        self.bn.running_mean.zero_()
        self.bn.running_var.fill_(1.0)
        return self
