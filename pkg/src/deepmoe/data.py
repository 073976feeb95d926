"""Datasets: the CIFAR-10 binary format and a synthetic desk-scale generator."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

RECORD_BYTES = 3073  # 1 label byte + 3 * 1024 channel-major pixel bytes

# Widely used CIFAR-10 per-channel statistics of the training split, in [0,1]
# scale. Recorded here so standardization is part of the configuration.
CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] float32
    labels: np.ndarray  # [N] int64
    coarse_labels: Optional[np.ndarray] = None  # [N] int64, for shuffling analysis
    split: str = "train"

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError("images and labels disagree on N")
        if self.coarse_labels is not None and self.coarse_labels.shape[0] != len(self.labels):
            raise ValueError("coarse labels disagree on N")

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1

    def subset(self, idx: np.ndarray, split: Optional[str] = None) -> "Dataset":
        coarse = self.coarse_labels[idx] if self.coarse_labels is not None else None
        return Dataset(self.images[idx], self.labels[idx], coarse,
                       split or self.split)


class DatasetFormatError(ValueError):
    """A data file does not follow the expected binary layout."""


def load_cifar10_bin(
    paths: Sequence[str],
    mean: Sequence[float] = CIFAR10_MEAN,
    std: Sequence[float] = CIFAR10_STD,
    split: str = "train",
) -> Dataset:
    """Parse CIFAR-10 binary batch files.

    Each record is 3073 bytes: one label byte then 3072 pixel bytes in
    channel-major (R plane, G plane, B plane) order. Pixels scale to [0,1]
    and are then standardized per channel with the given constants.
    """
    images: List[np.ndarray] = []
    labels: List[np.ndarray] = []
    for path in paths:
        with open(path, "rb") as f:
            raw = np.frombuffer(f.read(), dtype=np.uint8)
        if raw.size == 0 or raw.size % RECORD_BYTES != 0:
            raise DatasetFormatError(
                f"{path}: size {raw.size} is not a multiple of {RECORD_BYTES}"
            )
        records = raw.reshape(-1, RECORD_BYTES)
        lab = records[:, 0].astype(np.int64)
        if lab.max() > 9:
            raise DatasetFormatError(f"{path}: label byte {lab.max()} out of range")
        images.append(records[:, 1:].reshape(-1, 3, 32, 32))
        labels.append(lab)
    pixels = np.concatenate(images).astype(np.float32) / 255.0
    m = np.asarray(mean, dtype=np.float32)[None, :, None, None]
    s = np.asarray(std, dtype=np.float32)[None, :, None, None]
    return Dataset((pixels - m) / s, np.concatenate(labels), None, split)


def write_cifar10_bin(path: str, images_u8: np.ndarray, labels: np.ndarray) -> None:
    """Inverse of the loader's parsing step (for round-trip tests and fixtures)."""
    n = images_u8.shape[0]
    records = np.empty((n, RECORD_BYTES), dtype=np.uint8)
    records[:, 0] = labels.astype(np.uint8)
    records[:, 1:] = images_u8.reshape(n, -1)
    with open(path, "wb") as f:
        f.write(records.tobytes())


def make_synthetic(
    n: int,
    classes: int,
    image_size: int = 16,
    seed: int = 0,
    channels: int = 3,
    noise: float = 0.25,
    split: str = "train",
) -> Dataset:
    """Class-conditional oriented gratings with coarse-group structure.

    Fine classes pair up into coarse groups: both members of a group share
    orientation and color tint and differ in spatial frequency, so group
    structure is visible to a shallow embedding while fine labels stay
    separable. Deterministic per seed; class counts are balanced up to
    remainder. A linear probe on raw pixels beats chance (fixed phase).
    """
    if n < classes:
        raise ValueError(f"need at least one example per class ({n} < {classes})")
    rng = np.random.default_rng(seed)
    groups = (classes + 1) // 2
    counts = [n // classes + (1 if i < n % classes else 0) for i in range(classes)]

    yy, xx = np.meshgrid(
        np.linspace(0.0, 1.0, image_size, endpoint=False),
        np.linspace(0.0, 1.0, image_size, endpoint=False),
        indexing="ij",
    )
    images = np.empty((n, channels, image_size, image_size), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    coarse = np.empty(n, dtype=np.int64)
    pos = 0
    for c in range(classes):
        g = c // 2
        theta = np.pi * g / groups
        freq = 2.0 if c % 2 == 0 else 4.0
        phase_axis = xx * np.cos(theta) + yy * np.sin(theta)
        grating = np.sin(2.0 * np.pi * freq * phase_axis)
        hue = 2.0 * np.pi * g / groups
        tint = 0.6 + 0.4 * np.sin(hue + 2.0 * np.pi * np.arange(channels) / channels)
        base = tint[:, None, None] * grating[None, :, :]
        k = counts[c]
        block = base[None] + noise * rng.standard_normal(
            (k, channels, image_size, image_size)
        )
        images[pos : pos + k] = block.astype(np.float32)
        labels[pos : pos + k] = c
        coarse[pos : pos + k] = g
        pos += k
    perm = rng.permutation(n)
    return Dataset(images[perm], labels[perm], coarse[perm], split)
