"""Desk-scale datasets, train/test splitting and seeded minibatch streams."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CKA_SAMPLES = 6400


class IdxFormatError(ValueError):
    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path}: byte offset {offset}: {message}")
        self.path = str(path)
        self.offset = offset


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        if self.features.ndim != 2 or self.labels.ndim != 1:
            raise ValueError("features must be 2-D and labels 1-D")
        if len(self.features) != len(self.labels):
            raise ValueError(
                f"{len(self.features)} feature rows but {len(self.labels)} labels"
            )
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if len(self.labels) < self.num_classes:
            raise ValueError(f"{len(self.labels)} samples cannot cover {self.num_classes} classes")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if np.isnan(self.features).any():
            raise ValueError("features contain NaN")
        self.features.flags.writeable = False
        self.labels.flags.writeable = False

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, index: np.ndarray, name: str | None = None) -> "Dataset":
        return Dataset(
            self.features[index], self.labels[index], self.num_classes, name or self.name
        )

    def fingerprint(self) -> str:
        h = hashlib.blake2b(digest_size=8)
        h.update(np.ascontiguousarray(self.features).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.hexdigest()


@dataclass(frozen=True, eq=False)
class DataSplit:
    train: Dataset
    test: Dataset

    @property
    def num_classes(self) -> int:
        return self.train.num_classes

    @property
    def dim(self) -> int:
        return self.train.dim


def _finish(features, labels, num_classes, name) -> Dataset:
    return Dataset(
        np.ascontiguousarray(features, dtype=np.float32),
        np.ascontiguousarray(labels, dtype=np.int64),
        int(num_classes),
        name,
    )


def _simplex_centers(num_classes: int, dim: int) -> np.ndarray:
    # basis vertices when they fit, otherwise a regular polygon in the first two axes
    if num_classes <= dim:
        return 2.0 * np.eye(num_classes, dim)
    if dim < 2:
        return 2.0 * np.arange(num_classes, dtype=float)[:, None]
    angles = 2 * np.pi * np.arange(num_classes) / num_classes
    centers = np.zeros((num_classes, dim))
    centers[:, 0] = 2.0 * np.cos(angles)
    centers[:, 1] = 2.0 * np.sin(angles)
    return centers


def gen_gaussian_blobs(
    num_classes: int, samples_per_class: int, dim: int, spread: float, seed: int
) -> Dataset:
    """Isotropic Gaussian clusters, one per class, centred on scaled simplex vertices."""
    if min(num_classes, samples_per_class, dim) < 1:
        raise ValueError("num_classes, samples_per_class and dim must be positive")
    rng = np.random.default_rng(seed)
    centers = _simplex_centers(num_classes, dim)
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    noise = rng.standard_normal((len(labels), dim)) * spread
    return _finish(centers[labels] + noise, labels, num_classes, "blobs")


def gen_spirals(
    num_classes: int, samples_per_class: int, noise: float, turns: float, seed: int
) -> Dataset:
    """Interleaved 2-D spirals.

    Arm ``c`` is rotated by ``2*pi*c/num_classes``. The radius runs over
    [0.1, 1] so arms never meet at the origin; ``noise`` is Gaussian jitter on
    the angle (radians), which keeps the jitter small relative to the arm gap
    near the centre.
    """
    if turns <= 0:
        raise ValueError(f"turns must be positive, got {turns}")
    if num_classes < 1 or samples_per_class < 1:
        raise ValueError("num_classes and samples_per_class must be positive")
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for c in range(num_classes):
        t = rng.uniform(0.0, 1.0, samples_per_class)
        radius = 0.1 + 0.9 * t
        theta = 2 * np.pi * (turns * t + c / num_classes)
        theta = theta + noise * rng.standard_normal(samples_per_class)
        xs.append(np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1))
        ys.append(np.full(samples_per_class, c))
    return _finish(np.concatenate(xs), np.concatenate(ys), num_classes, "spirals")


def _read_exact(buf: bytes, offset: int, size: int, path, what: str) -> bytes:
    if offset + size > len(buf):
        raise IdxFormatError(
            path, len(buf), f"truncated {what}: need {size} bytes at {offset}, file has {len(buf)}"
        )
    return buf[offset:offset + size]


def read_idx_images(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (magic,) = struct.unpack(">I", _read_exact(buf, 0, 4, path, "magic"))
    if magic != IDX_IMAGES_MAGIC:
        raise IdxFormatError(path, 0, f"bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
    n, rows, cols = struct.unpack(">III", _read_exact(buf, 4, 12, path, "header"))
    pixels = _read_exact(buf, 16, n * rows * cols, path, "image data")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(n, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (magic,) = struct.unpack(">I", _read_exact(buf, 0, 4, path, "magic"))
    if magic != IDX_LABELS_MAGIC:
        raise IdxFormatError(path, 0, f"bad magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
    (n,) = struct.unpack(">I", _read_exact(buf, 4, 4, path, "header"))
    return np.frombuffer(_read_exact(buf, 8, n, path, "label data"), dtype=np.uint8)


def load_idx_subset(images_path, labels_path, max_per_class: int, seed: int) -> Dataset:
    """Class-balanced subsample of an IDX image/label pair, pixels scaled to [0, 1]."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path).astype(np.int64)
    if len(images) != len(labels):
        raise IdxFormatError(
            labels_path, 4, f"label count {len(labels)} != image count {len(images)}"
        )
    if len(labels) == 0:
        raise IdxFormatError(labels_path, 4, "file holds no samples")
    rng = np.random.default_rng(seed)
    keep = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        keep.append(rng.permutation(idx)[:max_per_class])
    keep = np.sort(np.concatenate(keep))
    features = images[keep].reshape(len(keep), -1).astype(np.float32) / 255.0
    return _finish(features, labels[keep], int(labels.max()) + 1, Path(images_path).stem)


def split_dataset(data: Dataset, seed: int, test_fraction: float = 0.2) -> DataSplit:
    """Seeded permutation split; the first ``1 - test_fraction`` goes to train."""
    perm = np.random.default_rng(seed).permutation(len(data))
    n_train = len(data) - int(round(test_fraction * len(data)))
    return DataSplit(
        data.subset(np.sort(perm[:n_train]), f"{data.name}/train"),
        data.subset(np.sort(perm[n_train:]), f"{data.name}/test"),
    )


def cka_sample_set(train: Dataset, seed: int, size: int = CKA_SAMPLES) -> np.ndarray:
    """First ``min(size, n)`` rows of a seeded permutation of the training set."""
    perm = np.random.default_rng(seed).permutation(len(train))
    return train.features[perm[: min(size, len(train))]]


class BatchStream:
    """Seeded minibatch iterator; one reshuffle per epoch, last partial batch kept."""

    def __init__(self, data: Dataset, batch_size: int, seed: int):
        if batch_size < 1:
            raise ValueError("batch_size must be positive")
        self.data = data
        self.batch_size = batch_size
        self.seed = seed
        self.epoch = 0
        self._rng = np.random.default_rng(seed)

    def epoch_order(self) -> np.ndarray:
        """Advance one epoch and return its visiting order."""
        self.epoch += 1
        return self._rng.permutation(len(self.data))

    def batches(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        order = self.epoch_order()
        x, y = self.data.features, self.data.labels
        for start in range(0, len(order), self.batch_size):
            idx = order[start:start + self.batch_size]
            yield x[idx], y[idx]
