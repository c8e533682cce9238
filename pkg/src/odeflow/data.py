"""Datasets: a deterministic synthetic shape generator, a CIFAR-10 binary reader, batching."""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from typing import Iterator

import numpy as np

from .container import atomic_write_bytes
from .diffcore import ContractError

RECORD = 3073
CIFAR_SIZE = 32

SHAPES = ("circle", "square", "cross", "stripes", "ring", "triangle", "x", "checker", "dots", "corner")


class FormatError(ValueError):
    """Malformed CIFAR-10 binary data."""


@dataclass
class DatasetSplit:
    """Images ``(n, H, W, C)`` in [0, 1] with integer labels.

    ``mean``/``std`` are per-channel statistics used by :meth:`normalized`;
    evaluation splits should carry the training split's statistics
    (see :meth:`with_stats`).
    """

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self):
        if self.mean is None:
            self.mean = self.images.mean(axis=(0, 1, 2)) if len(self.images) else np.zeros(self.images.shape[-1])
        if self.std is None:
            s = self.images.std(axis=(0, 1, 2)) if len(self.images) else np.ones(self.images.shape[-1])
            self.std = np.where(s > 0, s, 1.0)

    def __len__(self) -> int:
        return len(self.labels)

    def with_stats(self, other: "DatasetSplit") -> "DatasetSplit":
        return replace(self, mean=other.mean.copy(), std=other.std.copy())

    def normalized(self, idx=None) -> np.ndarray:
        x = self.images if idx is None else self.images[idx]
        return (x - self.mean) / self.std

    def subset(self, idx) -> "DatasetSplit":
        return replace(self, images=self.images[idx], labels=self.labels[idx])


# ---------------------------------------------------------------- synthetic


def _mask(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    cy, cx = size / 2 + rng.uniform(-0.15, 0.15, 2) * size
    r = rng.uniform(0.2, 0.34) * size
    dy, dx = yy - cy, xx - cx
    w = max(1.5, 0.28 * r)
    if kind == "circle":
        return dy**2 + dx**2 <= r**2
    if kind == "square":
        return (np.abs(dy) <= 0.8 * r) & (np.abs(dx) <= 0.8 * r)
    if kind == "cross":
        return ((np.abs(dy) <= w / 2) & (np.abs(dx) <= r)) | ((np.abs(dx) <= w / 2) & (np.abs(dy) <= r))
    if kind == "stripes":
        theta = rng.uniform(0, np.pi)
        period = rng.uniform(0.18, 0.3) * size
        u = xx * np.cos(theta) + yy * np.sin(theta) + rng.uniform(0, period)
        return (u % period) < period / 2
    if kind == "ring":
        d = np.sqrt(dy**2 + dx**2)
        return (d <= r) & (d >= r - w)
    if kind == "triangle":
        return (dy <= 0.7 * r) & (dy >= -r + 2 * np.abs(dx) * 0.85)
    if kind == "x":
        a, b = np.abs(dy - dx), np.abs(dy + dx)
        inside = (np.abs(dy) <= r * 0.8) & (np.abs(dx) <= r * 0.8)
        return inside & ((a <= w * 0.7) | (b <= w * 0.7))
    if kind == "checker":
        cell = max(2.0, r / 2)
        inside = (np.abs(dy) <= r) & (np.abs(dx) <= r)
        return inside & (((np.floor(dy / cell) + np.floor(dx / cell)) % 2) == 0)
    if kind == "dots":
        off = 0.6 * r
        return ((dy - off) ** 2 + (dx - off) ** 2 <= (0.4 * r) ** 2) | ((dy + off) ** 2 + (dx + off) ** 2 <= (0.4 * r) ** 2)
    if kind == "corner":
        return ((np.abs(dx + 0.6 * r) <= w / 2) & (np.abs(dy) <= r)) | ((np.abs(dy - 0.6 * r) <= w / 2) & (np.abs(dx) <= r))
    raise ValueError(kind)


def gen_synthetic(n: int, num_classes: int = 4, size: int = 32, seed: int = 0,
                  split: str = "train", noise: float = 0.05) -> DatasetSplit:
    """Parametric shapes with jittered position, scale, colour and Gaussian pixel noise.

    Labels are assigned round-robin (sample i has label ``i % num_classes``),
    so classes are balanced exactly when ``n`` is a multiple of ``num_classes``.
    """
    if not 2 <= num_classes <= len(SHAPES):
        raise ContractError(f"num_classes must be in 2..{len(SHAPES)}")
    if size not in (16, 32):
        raise ContractError(f"unsupported size {size}; use 16 or 32")
    rng = np.random.default_rng(seed)
    images = np.empty((n, size, size, 3))
    labels = np.arange(n) % num_classes
    for i in range(n):
        bg = rng.uniform(0.0, 0.35, 3)
        fg = rng.uniform(0.45, 1.0, 3)
        m = _mask(SHAPES[labels[i]], size, rng)[..., None]
        img = np.where(m, fg, bg) + noise * rng.standard_normal((size, size, 3))
        images[i] = np.clip(img, 0.0, 1.0)
    return DatasetSplit(images, labels, num_classes, split)


# ---------------------------------------------------------------- CIFAR-10 binary


def decode_cifar10(raw: bytes, split: str = "train", num_classes: int = 10) -> DatasetSplit:
    if len(raw) % RECORD:
        raise FormatError(f"{len(raw)} bytes is not a multiple of the {RECORD}-byte record")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        raise FormatError(f"label byte {labels.max()} > 9")
    px = rec[:, 1:].reshape(-1, 3, CIFAR_SIZE, CIFAR_SIZE).transpose(0, 2, 3, 1)
    return DatasetSplit(px.astype(np.float64) / 255.0, labels, num_classes, split)


def load_cifar10_binary(path: str | os.PathLike, split: str = "train", num_classes: int = 10) -> DatasetSplit:
    """Read records of one label byte followed by 1024 R, 1024 G, 1024 B bytes."""
    with open(path, "rb") as f:
        return decode_cifar10(f.read(), split, num_classes)


def encode_cifar10(split: DatasetSplit) -> bytes:
    """Inverse of :func:`decode_cifar10`; pixels are rounded to bytes."""
    n, h, w, c = split.images.shape
    if (h, w, c) != (CIFAR_SIZE, CIFAR_SIZE, 3):
        raise ContractError(f"CIFAR-10 layout needs 32x32x3 images, got {h}x{w}x{c}")
    if len(split) and split.labels.max() > 9:
        raise ContractError("CIFAR-10 layout holds labels 0..9 only")
    px = np.clip(np.rint(split.images * 255.0), 0, 255).astype(np.uint8).transpose(0, 3, 1, 2)
    rec = np.empty((n, RECORD), dtype=np.uint8)
    rec[:, 0] = split.labels
    rec[:, 1:] = px.reshape(n, -1)
    return rec.tobytes()


def save_cifar10_binary(path: str | os.PathLike, split: DatasetSplit) -> None:
    atomic_write_bytes(path, encode_cifar10(split))


# ---------------------------------------------------------------- batching


@dataclass
class Batch:
    images: np.ndarray  # normalized
    labels: np.ndarray
    indices: np.ndarray


def batch_indices(n: int, batch_size: int, shuffle_seed: int | None = 0, epoch: int = 0) -> list[np.ndarray]:
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    order = np.arange(n)
    if shuffle_seed is not None:
        order = np.random.default_rng([shuffle_seed, epoch]).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def batches(split: DatasetSplit, batch_size: int, shuffle_seed: int | None = 0,
            epoch: int = 0) -> Iterator[Batch]:
    """Deterministic per-(seed, epoch) shuffle; the final partial batch is kept.

    ``shuffle_seed=None`` keeps the stored order.
    """
    for idx in batch_indices(len(split), batch_size, shuffle_seed, epoch):
        yield Batch(split.normalized(idx), split.labels[idx], idx)
