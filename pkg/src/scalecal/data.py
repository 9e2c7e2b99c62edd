"""CIFAR-10 binary ingestion, a synthetic stand-in dataset, and augmentation."""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

RECORD_BYTES = 1 + 3 * 32 * 32
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILES = ("test_batch.bin",)

CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (count, 3, 32, 32) uint8
    labels: np.ndarray  # (count,) int64
    split: str = "train"
    num_classes: int = 10

    def __post_init__(self):
        if len(self.images) == 0:
            raise DataError("dataset is empty")
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DataError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, count: int, seed: int = 0) -> "Dataset":
        """A seeded random subset (the whole set when count >= len)."""
        if count >= len(self):
            return self
        idx = np.sort(np.random.default_rng(seed).permutation(len(self))[:count])
        return Dataset(self.images[idx], self.labels[idx], self.split, self.num_classes)

    def take(self, count: int) -> "Dataset":
        return Dataset(self.images[:count], self.labels[:count], self.split, self.num_classes)


def parse_cifar_file(path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing CIFAR-10 file: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    whole = len(raw) // RECORD_BYTES
    if len(raw) % RECORD_BYTES:
        raise DataError(f"{path}: truncated record at byte offset {whole * RECORD_BYTES} "
                        f"(file size {len(raw)} is not a multiple of {RECORD_BYTES})")
    records = raw.reshape(whole, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= 10)
    if bad.size:
        raise DataError(f"{path}: label {labels[bad[0]]} >= 10 at byte offset {bad[0] * RECORD_BYTES}")
    images = np.ascontiguousarray(records[:, 1:].reshape(whole, 3, 32, 32))
    return images, labels


def _resolve_cifar_dir(directory) -> Path:
    d = Path(directory)
    nested = d / "cifar-10-batches-bin"
    if not (d / TEST_FILES[0]).exists() and nested.is_dir():
        return nested
    return d


def load_cifar10(directory) -> tuple[Dataset, Dataset]:
    """Read the six standard ``*.bin`` batch files from ``directory``."""
    d = _resolve_cifar_dir(directory)
    if not d.is_dir():
        raise DataError(f"CIFAR-10 directory not found: {d}")

    def read(names, split):
        parts = [parse_cifar_file(d / n) for n in names]
        return Dataset(np.concatenate([p[0] for p in parts]),
                       np.concatenate([p[1] for p in parts]), split, 10)

    return read(TRAIN_FILES, "train"), read(TEST_FILES, "test")


def _palette(num_classes: int) -> np.ndarray:
    cols = [colorsys.hsv_to_rgb(k / num_classes, 0.9, 1.0) for k in range(num_classes)]
    return np.array(cols) * 255.0


def synthetic_dataset(seed: int, count: int, num_classes: int = 10,
                      mode: str = "separable-blobs", split: str = "train") -> Dataset:
    """Class-coloured Gaussian blobs at class-dependent positions on a noisy background.

    Labels are stratified (``count // num_classes`` per class, remainder spread
    over the first classes) and shuffled; output is a pure function of the seed.
    """
    if mode != "separable-blobs":
        raise ValueError(f"unknown synthetic mode {mode!r}")
    if count < num_classes:
        raise ValueError(f"count ({count}) must be >= num_classes ({num_classes})")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(count) % num_classes).astype(np.int64)
    palette = _palette(num_classes)
    yy, xx = np.mgrid[0:32, 0:32].astype(np.float64)
    angles = 2 * np.pi * np.arange(num_classes) / num_classes
    images = np.empty((count, 3, 32, 32), dtype=np.uint8)
    for i, k in enumerate(labels):
        cy = 15.5 + 8.0 * np.sin(angles[k]) + rng.uniform(-2, 2)
        cx = 15.5 + 8.0 * np.cos(angles[k]) + rng.uniform(-2, 2)
        sigma = rng.uniform(3.0, 4.5)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        color = palette[k] * rng.uniform(0.7, 1.0)
        bg = rng.uniform(0, 90, size=(3, 32, 32))
        img = bg * (1 - blob) + color[:, None, None] * blob
        images[i] = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return Dataset(images, labels, split, num_classes)


@dataclass
class AugmentConfig:
    pad_crop: int = 4
    hflip_prob: float = 0.5
    mean: Sequence[float] = field(default=CIFAR_MEAN)
    std: Sequence[float] = field(default=CIFAR_STD)

    def __post_init__(self):
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError(f"hflip_prob must be in [0, 1], got {self.hflip_prob}")
        if self.pad_crop < 0:
            raise ValueError(f"pad_crop must be >= 0, got {self.pad_crop}")
        if len(self.mean) != 3 or len(self.std) != 3 or min(self.std) <= 0:
            raise ValueError("mean and std need 3 entries each, std > 0")


def normalize(images: np.ndarray, cfg: AugmentConfig) -> np.ndarray:
    x = images.astype(np.float32) / np.float32(255.0)
    mean = np.asarray(cfg.mean, dtype=np.float32).reshape(1, 3, 1, 1)
    std = np.asarray(cfg.std, dtype=np.float32).reshape(1, 3, 1, 1)
    return (x - mean) / std


def denormalize(x: np.ndarray, cfg: AugmentConfig) -> np.ndarray:
    """Inverse of :func:`normalize`, returning pixel values in [0, 255]."""
    mean = np.asarray(cfg.mean, dtype=np.float32).reshape(1, 3, 1, 1)
    std = np.asarray(cfg.std, dtype=np.float32).reshape(1, 3, 1, 1)
    return (x * std + mean) * np.float32(255.0)


def hflip(images: np.ndarray) -> np.ndarray:
    return images[..., ::-1]


def augment(batch: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Pad + random crop, random horizontal flip, then per-channel normalization."""
    n, _, h, w = batch.shape
    p = cfg.pad_crop
    out = batch
    if p:
        padded = np.pad(batch, ((0, 0), (0, 0), (p, p), (p, p)))
        oy = rng.integers(0, 2 * p + 1, size=n)
        ox = rng.integers(0, 2 * p + 1, size=n)
        out = np.empty_like(batch)
        for i in range(n):
            out[i] = padded[i, :, oy[i] : oy[i] + h, ox[i] : ox[i] + w]
    if cfg.hflip_prob > 0:
        flip = rng.random(n) < cfg.hflip_prob
        if flip.any():
            out = out.copy() if out is batch else out
            out[flip] = out[flip][..., ::-1]
    return normalize(out, cfg)


def iterate_batches(count: int, batch_size: int, rng: Optional[np.random.Generator] = None,
                    drop_last: bool = False) -> Iterator[np.ndarray]:
    """Index arrays for one epoch; shuffled when ``rng`` is given."""
    order = rng.permutation(count) if rng is not None else np.arange(count)
    stop = count - count % batch_size if drop_last else count
    for start in range(0, stop, batch_size):
        idx = order[start : start + batch_size]
        if len(idx):
            yield idx
