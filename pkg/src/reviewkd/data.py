"""Datasets and batching.

Two sources feed the harness: a synthetic prototype-plus-noise task sized for
desk runs, and the standard pickled 32x32 archives for full-scale runs.  Both
go through per-channel standardization using train-split statistics, and both
produce deterministic batch streams: the shuffle order and every augmentation
draw come from a generator seeded by (seed, epoch).
"""

from __future__ import annotations

import os
import pickle
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import torch

from .core import ConfigError

DATA_ROOT_ENV = "REVIEWKD_DATA_ROOT"

_PAD = 4  # crop padding for train-time augmentation


@dataclass
class LabeledBatch:
    """One batch of standardized images with integer class labels."""

    images: torch.Tensor  # (N, C, H, W) float32
    labels: torch.Tensor  # (N,) int64

    def __len__(self) -> int:
        return self.images.shape[0]


@dataclass
class Dataset:
    """An in-memory split: standardized images, labels, and batching rules."""

    images: torch.Tensor  # (N, C, H, W) float32, already standardized
    labels: torch.Tensor  # (N,) int64
    classes: int
    augment: bool  # random crop + flip during batching

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_hw(self) -> tuple[int, int]:
        return self.images.shape[2], self.images.shape[3]

    def class_counts(self) -> list[int]:
        return torch.bincount(self.labels, minlength=self.classes).tolist()

    def batches(
        self,
        batch_size: int,
        seed: int = 0,
        epoch: int = 0,
        shuffle: bool = True,
    ) -> Iterator[LabeledBatch]:
        """Yield batches in an order (and with augmentation draws) fully
        determined by (seed, epoch)."""
        if batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
        g = torch.Generator().manual_seed((seed * 1_000_003 + epoch) % 2**63)
        n = len(self)
        order = torch.randperm(n, generator=g) if shuffle else torch.arange(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            images = self.images[idx]
            if self.augment:
                images = _augment(images, g)
            yield LabeledBatch(images=images, labels=self.labels[idx])


def _augment(images: torch.Tensor, g: torch.Generator) -> torch.Tensor:
    """Random crop after 4-pixel zero padding, then random horizontal flip."""
    n, _, h, w = images.shape
    padded = torch.nn.functional.pad(images, (_PAD, _PAD, _PAD, _PAD))
    tops = torch.randint(0, 2 * _PAD + 1, (n,), generator=g)
    lefts = torch.randint(0, 2 * _PAD + 1, (n,), generator=g)
    flips = torch.rand(n, generator=g) < 0.5
    out = torch.empty_like(images)
    for k in range(n):
        crop = padded[k, :, tops[k] : tops[k] + h, lefts[k] : lefts[k] + w]
        out[k] = torch.flip(crop, dims=[2]) if flips[k] else crop
    return out


@dataclass
class DataBundle:
    """Train and test splits of one task."""

    train: Dataset
    test: Dataset
    classes: int
    name: str


def _standardize_pair(
    train_images: torch.Tensor, test_images: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-channel zero-mean/unit-variance using train-split statistics."""
    mean = train_images.mean(dim=(0, 2, 3), keepdim=True)
    std = train_images.std(dim=(0, 2, 3), keepdim=True).clamp_min(1e-6)
    return (train_images - mean) / std, (test_images - mean) / std


def synthetic_dataset(
    classes: int = 8,
    per_class: int = 64,
    size: int = 16,
    seed: int = 0,
    *,
    test_per_class: Optional[int] = None,
    noise_scale: float = 1.6,
    prototype_cells: int = 4,
) -> DataBundle:
    """Balanced image classification task built from noisy class prototypes.

    Each class gets a fixed blocky prototype (a coarse random field upsampled
    to ``size``); samples are the prototype plus dense Gaussian noise.  The
    task is easy to fit and, with enough noise, hard to generalize from few
    samples — which is what separates a small network from a large one.
    Identical arguments produce an identical bundle.
    """
    if classes < 2:
        raise ConfigError(f"classes must be >= 2, got {classes}")
    if per_class < 1:
        raise ConfigError(f"per_class must be >= 1, got {per_class}")
    if test_per_class is None:
        test_per_class = max(per_class, 32)
    g = torch.Generator().manual_seed(seed)
    coarse = torch.randn(classes, 3, prototype_cells, prototype_cells, generator=g)
    prototypes = torch.nn.functional.interpolate(coarse, size=(size, size), mode="nearest")

    def draw(count: int, gen: torch.Generator) -> tuple[torch.Tensor, torch.Tensor]:
        images = prototypes.repeat_interleave(count, dim=0)
        images = images + noise_scale * torch.randn(images.shape, generator=gen)
        labels = torch.arange(classes).repeat_interleave(count)
        return images, labels

    train_images, train_labels = draw(per_class, g)
    test_gen = torch.Generator().manual_seed(seed + 7_919)
    test_images, test_labels = draw(test_per_class, test_gen)
    train_images, test_images = _standardize_pair(train_images, test_images)
    return DataBundle(
        train=Dataset(train_images, train_labels, classes, augment=False),
        test=Dataset(test_images, test_labels, classes, augment=False),
        classes=classes,
        name=f"synthetic-c{classes}-n{per_class}-s{size}-seed{seed}",
    )


def resolve_data_root(explicit: Optional[str] = None) -> Path:
    """Directory holding the pickled archives: the explicit path if given,
    otherwise the environment override, otherwise ./data."""
    if explicit:
        return Path(explicit)
    env = os.environ.get(DATA_ROOT_ENV)
    return Path(env) if env else Path("data")


def _unpickle(path: Path) -> dict:
    with open(path, "rb") as f:
        return pickle.load(f, encoding="bytes")


def _read_archive_files(root: Path, names: list[str]) -> tuple[np.ndarray, np.ndarray]:
    """Concatenate images/labels from pickled batch files under ``root``.

    Each file holds a dict with an (N, 3072) uint8 ``data`` array and a label
    list under ``fine_labels`` (100-class layout) or ``labels`` (10-class).
    """
    images, labels = [], []
    for name in names:
        path = root / name
        if not path.is_file():
            raise FileNotFoundError(f"expected pickled batch file not found: {path}")
        record = _unpickle(path)
        data = record.get(b"data")
        raw_labels = record.get(b"fine_labels", record.get(b"labels"))
        if data is None or raw_labels is None:
            raise ConfigError(f"not a pickled image batch: {path}")
        images.append(np.asarray(data, dtype=np.uint8).reshape(-1, 3, 32, 32))
        labels.append(np.asarray(raw_labels, dtype=np.int64))
    return np.concatenate(images), np.concatenate(labels)


def _locate_archive(root: Path) -> tuple[Path, list[str], list[str]]:
    """Find the archive directory and its train/test file names."""
    candidates = [root, root / "cifar-100-python", root / "cifar-10-batches-py"]
    for base in candidates:
        if (base / "train").is_file():
            return base, ["train"], ["test"]
        if (base / "data_batch_1").is_file():
            return base, [f"data_batch_{k}" for k in range(1, 6)], ["test_batch"]
    tried = ", ".join(str(c / "train") for c in candidates)
    raise FileNotFoundError(
        f"no pickled archive found under {root} (looked for {tried} "
        f"and data_batch_1 alongside each)"
    )


def load_cifar(root: Optional[str] = None, split: str = "train") -> Dataset:
    """Load one split of a standard pickled 32x32 archive.

    Standardization statistics always come from the train split; the train
    split augments during batching, the test split never does.
    """
    if split not in ("train", "test"):
        raise ConfigError(f"split must be 'train' or 'test', got {split!r}")
    base, train_names, test_names = _locate_archive(resolve_data_root(root))
    train_np, train_labels = _read_archive_files(base, train_names)
    train_images = torch.from_numpy(train_np).float() / 255.0
    if split == "train":
        images, labels = train_images, train_labels
    else:
        test_np, labels = _read_archive_files(base, test_names)
        images = torch.from_numpy(test_np).float() / 255.0
    mean = train_images.mean(dim=(0, 2, 3), keepdim=True)
    std = train_images.std(dim=(0, 2, 3), keepdim=True).clamp_min(1e-6)
    images = (images - mean) / std
    classes = int(labels.max()) + 1
    return Dataset(
        images=images,
        labels=torch.from_numpy(labels),
        classes=classes,
        augment=(split == "train"),
    )


def load_cifar_bundle(root: Optional[str] = None) -> DataBundle:
    train = load_cifar(root, "train")
    test = load_cifar(root, "test")
    return DataBundle(train=train, test=test, classes=train.classes, name="cifar")
