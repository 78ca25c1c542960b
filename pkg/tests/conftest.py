"""Shared fixtures: single-threaded torch and small feature-map builders."""

from __future__ import annotations

import pytest
import torch

from reviewkd.core import STUDENT, TEACHER, FeatureMap, StageOutputs

torch.set_num_threads(1)


def make_outputs(
    shapes: list[tuple[int, int, int]],
    batch: int = 2,
    classes: int = 5,
    source: str = STUDENT,
    seed: int = 0,
    dtype: torch.dtype = torch.float32,
) -> StageOutputs:
    """Random stage outputs with the given per-stage (C, H, W) shapes."""
    g = torch.Generator().manual_seed(seed)
    features = [
        FeatureMap(
            data=torch.randn(batch, c, h, w, generator=g, dtype=dtype),
            stage=k,
            source=source,
        )
        for k, (c, h, w) in enumerate(shapes, start=1)
    ]
    logits = torch.randn(batch, classes, generator=g, dtype=dtype)
    return StageOutputs(features=features, logits=logits)


def random_stage_shapes(
    n: int, rng: torch.Generator, max_channels: int = 6, max_hw: int = 8
) -> list[tuple[int, int, int]]:
    """Shapes with non-increasing spatial sizes, as a stage stack produces."""
    shapes = []
    h = int(torch.randint(2, max_hw + 1, (1,), generator=rng))
    w = int(torch.randint(2, max_hw + 1, (1,), generator=rng))
    for _ in range(n):
        c = int(torch.randint(1, max_channels + 1, (1,), generator=rng))
        shapes.append((c, h, w))
        if h > 1 and bool(torch.randint(0, 2, (1,), generator=rng)):
            h = max(1, h // 2)
            w = max(1, w // 2)
    return shapes


@pytest.fixture()
def tiny_outputs() -> tuple[StageOutputs, StageOutputs]:
    student = make_outputs([(3, 8, 8), (4, 4, 4), (6, 2, 2)], source=STUDENT, seed=1)
    teacher = make_outputs([(4, 8, 8), (6, 4, 4), (8, 2, 2)], source=TEACHER, seed=2)
    return student, teacher


def fd_input_gradient_check(
    fn,
    tensors: list[torch.Tensor],
    step: float = 1e-3,
    rel_tol: float = 1e-3,
    max_coords: int = 24,
    seed: int = 0,
) -> None:
    """Compare autograd input gradients against central finite differences.

    ``fn`` maps the tensors to a scalar.  Works in float64; checks a sample
    of coordinates per tensor.  Coordinates whose analytic and numeric values
    are both tiny are compared absolutely, everything else relatively.
    """
    g = torch.Generator().manual_seed(seed)
    leaves = [t.detach().double().requires_grad_(True) for t in tensors]
    value = fn(*leaves)
    grads = torch.autograd.grad(value, leaves, allow_unused=False)
    for leaf, grad in zip(leaves, grads):
        flat = leaf.detach().reshape(-1)
        n = flat.numel()
        count = min(max_coords, n)
        coords = torch.randperm(n, generator=g)[:count]
        for coord in coords.tolist():
            original = flat[coord].item()
            with torch.no_grad():
                flat[coord] = original + step
                plus = float(fn(*leaves))
                flat[coord] = original - step
                minus = float(fn(*leaves))
                flat[coord] = original
            numeric = (plus - minus) / (2 * step)
            analytic = float(grad.reshape(-1)[coord])
            scale = max(abs(numeric), abs(analytic))
            if scale < 1e-6:
                assert abs(numeric - analytic) < 1e-6
            else:
                rel = abs(numeric - analytic) / scale
                assert rel < rel_tol, (
                    f"coord {coord}: analytic {analytic}, numeric {numeric}, "
                    f"rel err {rel}"
                )
