"""Datasets: a procedural motif generator and the CIFAR-10 binary format."""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from typing import Iterator, Optional

import numpy as np

SPLITS = ("train", "val", "test", "unsplit")

# per-channel statistics of the CIFAR-10 training images, pixel scale [0, 1]
CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)
CIFAR10_RECORD = 1 + 3 * 32 * 32
CIFAR10_PER_FILE = 10_000


class DatasetError(ValueError):
    pass


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray
    split: str

    def __len__(self) -> int:
        return len(self.y)


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W)
    labels: np.ndarray  # (N,) int64
    num_classes: int
    split: str = "unsplit"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DatasetError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.split not in SPLITS:
            raise DatasetError(f"unknown split tag {self.split!r}")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx, split: Optional[str] = None) -> "Dataset":
        idx = np.asarray(idx)
        if idx.dtype != bool:
            idx = idx.astype(np.int64)
        return replace(self, images=self.images[idx], labels=self.labels[idx], split=split or self.split)

    def astype(self, dtype) -> "Dataset":
        return replace(self, images=self.images.astype(dtype))

    def batch(self, idx) -> Batch:
        idx = np.asarray(idx)
        return Batch(self.images[idx], self.labels[idx], self.split)

    def batches(self, batch_size: int, order: Optional[np.ndarray] = None) -> Iterator[Batch]:
        """Consecutive batches over ``order`` (default: stored order); the last may be short."""
        order = np.arange(len(self)) if order is None else order
        for start in range(0, len(order), batch_size):
            yield self.batch(order[start:start + batch_size])


# ---------------------------------------------------------------- synthetic motifs

@dataclass(frozen=True)
class SyntheticSpec:
    image_size: int = 16
    channels: int = 3
    num_classes: int = 4
    samples_per_class: int = 100
    noise: float = 0.5
    jitter: float = 0.25  # max motif offset as a fraction of the image size

    def __post_init__(self):
        if not 2 <= self.num_classes <= len(MOTIFS):
            raise ValueError(f"num_classes must lie in [2, {len(MOTIFS)}]")
        if self.image_size < 6:
            raise ValueError("image_size must be at least 6")


def _bar(yy, xx, angle, half_len, half_width):
    c, s = np.cos(angle), np.sin(angle)
    along = xx * c + yy * s
    across = -xx * s + yy * c
    return ((np.abs(along) <= half_len) & (np.abs(across) <= half_width)).astype(float)


def _motif_horizontal(yy, xx, r, rng):
    return _bar(yy, xx, 0.0, r, max(0.6, 0.15 * r))


def _motif_vertical(yy, xx, r, rng):
    return _bar(yy, xx, np.pi / 2, r, max(0.6, 0.15 * r))


def _motif_diagonal(yy, xx, r, rng):
    return _bar(yy, xx, np.pi / 4, r, max(0.6, 0.15 * r))


def _motif_ring(yy, xx, r, rng):
    d = np.sqrt(yy ** 2 + xx ** 2)
    return (np.abs(d - 0.7 * r) <= 0.6).astype(float)


def _motif_blob(yy, xx, r, rng):
    return np.exp(-(yy ** 2 + xx ** 2) / (2 * (0.35 * r) ** 2))


def _motif_cross(yy, xx, r, rng):
    w = max(0.6, 0.15 * r)
    return np.maximum(_bar(yy, xx, 0.0, r, w), _bar(yy, xx, np.pi / 2, r, w))


def _motif_antidiagonal(yy, xx, r, rng):
    return _bar(yy, xx, -np.pi / 4, r, max(0.6, 0.15 * r))


def _motif_square(yy, xx, r, rng):
    h = 0.6 * r
    inside = (np.abs(yy) <= h) & (np.abs(xx) <= h)
    edge = inside & ((np.abs(yy) >= h - 1) | (np.abs(xx) >= h - 1))
    return edge.astype(float)


MOTIFS = (_motif_horizontal, _motif_vertical, _motif_ring, _motif_blob,
          _motif_diagonal, _motif_cross, _motif_antidiagonal, _motif_square)


def generate_synthetic_dataset(spec: SyntheticSpec, seed: int) -> Dataset:
    """Balanced classes of jittered motifs over Gaussian noise, standardized per channel."""
    rng = np.random.default_rng(seed)
    s = spec.image_size
    n = spec.num_classes * spec.samples_per_class
    labels = np.repeat(np.arange(spec.num_classes), spec.samples_per_class)
    labels = labels[rng.permutation(n)]
    grid = np.arange(s) - (s - 1) / 2
    images = np.empty((n, spec.channels, s, s))
    max_shift = spec.jitter * s
    for i, lab in enumerate(labels):
        dy, dx = rng.uniform(-max_shift, max_shift, size=2)
        radius = rng.uniform(0.25, 0.4) * s
        yy, xx = np.meshgrid(grid - dy, grid - dx, indexing="ij")
        mask = MOTIFS[lab](yy, xx, radius, rng)
        color = rng.uniform(0.5, 1.0, size=spec.channels) * rng.choice([-1.0, 1.0])
        images[i] = mask[None] * color[:, None, None] + spec.noise * rng.standard_normal((spec.channels, s, s))
    mean = images.mean(axis=(0, 2, 3), keepdims=True)
    std = images.std(axis=(0, 2, 3), keepdims=True)
    images = (images - mean) / np.where(std > 0, std, 1.0)
    return Dataset(images, labels.astype(np.int64), spec.num_classes)


# ---------------------------------------------------------------- CIFAR-10

def _read_cifar_file(path: str) -> tuple:
    if not os.path.exists(path):
        raise DatasetError(f"missing CIFAR-10 batch file {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size != CIFAR10_RECORD * CIFAR10_PER_FILE:
        raise DatasetError(f"{path}: expected {CIFAR10_RECORD * CIFAR10_PER_FILE} bytes, found {raw.size}")
    rec = raw.reshape(CIFAR10_PER_FILE, CIFAR10_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise DatasetError(f"{path}: label byte out of range")
    return rec[:, 1:].reshape(-1, 3, 32, 32), labels


def load_cifar10(directory: str, dtype=np.float32) -> tuple:
    """Read the binary CIFAR-10 release; returns ``(train, test)`` datasets.

    Pixels are scaled to [0, 1] then standardized with ``CIFAR10_MEAN`` and
    ``CIFAR10_STD``.
    """
    sub = os.path.join(directory, "cifar-10-batches-bin")
    if os.path.isdir(sub):
        directory = sub
    mean = np.asarray(CIFAR10_MEAN, dtype=dtype).reshape(1, 3, 1, 1)
    std = np.asarray(CIFAR10_STD, dtype=dtype).reshape(1, 3, 1, 1)

    def load(names, split):
        parts = [_read_cifar_file(os.path.join(directory, nm)) for nm in names]
        x = np.concatenate([p[0] for p in parts]).astype(dtype) / 255.0
        y = np.concatenate([p[1] for p in parts])
        return Dataset((x - mean) / std, y, 10, split)

    train = load([f"data_batch_{i}.bin" for i in range(1, 6)], "unsplit")
    test = load(["test_batch.bin"], "test")
    return train, test
