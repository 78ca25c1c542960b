"""Attention-based fusion of student features across stages, and the
pyramid-pooled context loss used to compare fused features against the
teacher."""

from __future__ import annotations

from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ConfigError, ShapeMismatchError


class ABF(nn.Module):
    """Merges a lower-stage student feature with the already-fused deeper
    feature through two per-pixel sigmoid gates.

    The deeper input is resized (nearest) to the lower feature's spatial size,
    the pair is concatenated to produce two single-channel gate maps, and the
    gated sum at `mid_channels` is both pushed through a 3x3 output projection
    (for comparison against the teacher) and handed back raw so the next
    fusion step can consume it.

    With `attention=False` the gates are fixed at 0.5 — the center of the
    sigmoid range — so the merge is a plain average with no learned,
    position-dependent weighting.  The gate maps start biased toward the
    lower (local) feature so early training behaves like same-level matching
    and the deep-feature mix is learned.
    """

    def __init__(
        self,
        in_channels: int,
        mid_channels: int,
        out_channels: int,
        attention: bool = True,
    ) -> None:
        super().__init__()
        self.in_channels = in_channels
        self.mid_channels = mid_channels
        self.out_channels = out_channels
        self.attention = attention
        self.reduce_conv = nn.Conv2d(in_channels, mid_channels, kernel_size=1)
        if attention:
            self.attention_conv = nn.Conv2d(2 * mid_channels, 2, kernel_size=1)
            with torch.no_grad():
                # Gates start constant — weighted toward the local feature —
                # and become input-dependent as these weights train away
                # from zero, which keeps early optimization stable.
                self.attention_conv.weight.zero_()
                self.attention_conv.bias.copy_(torch.tensor([2.0, -2.0]))
        self.out_conv = nn.Conv2d(mid_channels, out_channels, kernel_size=3, padding=1)

    def forward(
        self, lower: torch.Tensor, higher: Optional[torch.Tensor] = None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (projected output, pre-projection fused feature)."""
        reduced = self.reduce_conv(lower)
        if higher is None:
            fused = reduced
        else:
            if higher.shape[1] != self.mid_channels:
                raise ShapeMismatchError(
                    f"fused input has {higher.shape[1]} channels, "
                    f"expected {self.mid_channels}"
                )
            if higher.shape[-2:] != reduced.shape[-2:]:
                higher = F.interpolate(higher, size=reduced.shape[-2:], mode="nearest")
            if self.attention:
                gates = torch.sigmoid(self.attention_conv(torch.cat([reduced, higher], dim=1)))
                a1 = gates[:, 0:1]
                a2 = gates[:, 1:2]
                fused = a1 * reduced + a2 * higher
            else:
                fused = 0.5 * reduced + 0.5 * higher
        return self.out_conv(fused), fused

    def attention_maps(
        self, lower: torch.Tensor, higher: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """The two (N, 1, H, W) gate maps for a given input pair."""
        if not self.attention:
            raise RuntimeError("attention disabled for this fuser")
        reduced = self.reduce_conv(lower)
        if higher.shape[-2:] != reduced.shape[-2:]:
            higher = F.interpolate(higher, size=reduced.shape[-2:], mode="nearest")
        gates = torch.sigmoid(self.attention_conv(torch.cat([reduced, higher], dim=1)))
        return gates[:, 0:1], gates[:, 1:2]

    @torch.no_grad()
    def init_identity(self) -> "ABF":
        """Set reduce/out convolutions to exact identities (requires matching
        channel counts); used to make the pass-through base case checkable."""
        if self.in_channels != self.mid_channels or self.mid_channels != self.out_channels:
            raise ConfigError(
                "identity init needs in == mid == out channels"
            )
        self.reduce_conv.weight.zero_()
        self.reduce_conv.bias.zero_()
        for c in range(self.mid_channels):
            self.reduce_conv.weight[c, c, 0, 0] = 1.0
        self.out_conv.weight.zero_()
        self.out_conv.bias.zero_()
        for c in range(self.mid_channels):
            self.out_conv.weight[c, c, 1, 1] = 1.0
        return self


class HCL(nn.Module):
    """Weighted sum of mean-squared distances between spatially pooled copies
    of two same-shape feature maps, one term per pyramid level.

    A level equal to the input size performs no pooling; levels larger than
    the input clamp down to it.  Weights normalize to sum 1 so adding levels
    does not inflate the loss scale.
    """

    def __init__(
        self, levels: Sequence[int], level_weights: Optional[Sequence[float]] = None
    ) -> None:
        super().__init__()
        levels = tuple(int(lv) for lv in levels)
        if not levels:
            raise ConfigError("at least one pyramid level required")
        if any(lv < 1 for lv in levels):
            raise ConfigError(f"levels must be >= 1, got {levels}")
        if any(a <= b for a, b in zip(levels, levels[1:])):
            raise ConfigError(f"levels must be descending, got {levels}")
        if level_weights is None:
            level_weights = [1.0 / len(levels)] * len(levels)
        if len(level_weights) != len(levels):
            raise ConfigError("one weight per level required")
        if any(w <= 0 for w in level_weights):
            raise ConfigError("weights must be positive")
        total = float(sum(level_weights))
        self.levels = levels
        self.level_weights = tuple(w / total for w in level_weights)

    def forward(self, student: torch.Tensor, teacher: torch.Tensor) -> torch.Tensor:
        if student.shape != teacher.shape:
            raise ShapeMismatchError(
                f"student {tuple(student.shape)} vs teacher {tuple(teacher.shape)}"
            )
        h, w = student.shape[-2:]
        loss = student.new_zeros(())
        for level, weight in zip(self.levels, self.level_weights):
            size = (min(level, h), min(level, w))
            if size == (h, w):
                ps, pt = student, teacher
            else:
                ps = F.adaptive_avg_pool2d(student, size)
                pt = F.adaptive_avg_pool2d(teacher, size)
            loss = loss + weight * F.mse_loss(ps, pt)
        return loss
