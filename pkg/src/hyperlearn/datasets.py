"""Datasets, train/val/test splits and a without-replacement batch sampler."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803  # 2051
IDX_LABELS_MAGIC = 0x00000801  # 2049

SYNTHETIC_TASKS = ("two_gaussians", "two_moons_like", "noisy_linear_regression")


class DataFormatError(ValueError):
    pass


class SamplerExhausted(RuntimeError):
    pass


def keyed_rng(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by ``(seed, *keys)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *keys])))


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] < 1 or self.inputs.shape[1] < 1:
            raise ValueError(f"inputs must be an M x D matrix with M, D >= 1, got {self.inputs.shape}")
        if not np.all(np.isfinite(self.inputs)):
            raise ValueError("inputs contain non-finite values")
        if len(self.labels) != self.inputs.shape[0]:
            raise ValueError(f"{len(self.labels)} labels for {self.inputs.shape[0]} inputs")
        if self.is_classification:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
                raise ValueError(f"labels must lie in [0, {self.num_classes})")
        else:
            self.labels = np.asarray(self.labels, dtype=np.float64)

    @property
    def is_classification(self) -> bool:
        return self.num_classes > 0

    @property
    def M(self) -> int:
        return self.inputs.shape[0]

    @property
    def D(self) -> int:
        return self.inputs.shape[1]

    def __len__(self):
        return self.M

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes, dict(self.extra))


@dataclass(frozen=True)
class SplitFractions:
    train_fraction: float = 0.8
    val_fraction: float = 0.1
    test_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        fr = (self.train_fraction, self.val_fraction, self.test_fraction)
        if min(fr) <= 0:
            raise ValueError(f"split fractions must be positive, got {fr}")
        if abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {sum(fr)!r}")


def split_indices(m: int, fractions: SplitFractions) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Disjoint train/val/test index sets that together cover ``range(m)``."""
    perm = keyed_rng(fractions.seed, 0x5EED).permutation(m)
    n_train = int(round(fractions.train_fraction * m))
    n_val = int(round(fractions.val_fraction * m))
    n_train = min(max(n_train, 1), m - 2)
    n_val = min(max(n_val, 1), m - n_train - 1)
    return perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]


def split_dataset(ds: Dataset, fractions: SplitFractions) -> tuple[Dataset, Dataset, Dataset]:
    if ds.M < 3:
        raise ValueError("need at least 3 examples to split")
    return tuple(ds.subset(i) for i in split_indices(ds.M, fractions))


def _read_exact(f, n, path):
    buf = f.read(n)
    if len(buf) != n:
        raise DataFormatError(f"{path}: truncated file (wanted {n} bytes, got {len(buf)})")
    return buf


def load_idx(images_path, labels_path) -> Dataset:
    """Read an IDX image/label file pair (MNIST layout) into a Dataset.

    Pixels are flattened to rows and scaled to [0, 1].
    """
    images_path, labels_path = Path(images_path), Path(labels_path)
    with open(images_path, "rb") as f:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, images_path))
        if magic != IDX_IMAGES_MAGIC:
            raise DataFormatError(
                f"{images_path}: bad magic number {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")
        pixels = np.frombuffer(_read_exact(f, count * rows * cols, images_path), dtype=np.uint8)
    with open(labels_path, "rb") as f:
        magic, n_labels = struct.unpack(">II", _read_exact(f, 8, labels_path))
        if magic != IDX_LABELS_MAGIC:
            raise DataFormatError(
                f"{labels_path}: bad magic number {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")
        labels = np.frombuffer(_read_exact(f, n_labels, labels_path), dtype=np.uint8)
    if n_labels != count:
        raise DataFormatError(f"count mismatch: {count} images but {n_labels} labels")
    inputs = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    return Dataset(inputs, labels.astype(np.int64), 10)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images (M x rows x cols) and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    m, rows, cols = images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, m, rows, cols))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.tobytes())


def load_mnist5k() -> Dataset:
    """The 5,000-image MNIST subset (500 per digit) that ships with mlxtend."""
    try:
        from mlxtend.data import mnist_data
    except ImportError as exc:
        raise RuntimeError(
            "dataset 'mnist5k' needs mlxtend (pip install 'hyperlearn[mnist]')") from exc
    X, y = mnist_data()
    return Dataset(np.asarray(X, dtype=np.float64) / 255.0, np.asarray(y), 10)


def make_synthetic(task: str, n: int, seed: int, noise: float = 1.0) -> Dataset:
    """Small deterministic tasks for fast experiments and tests.

    ``noise`` scales the stochastic part of each generator; ``noise=0`` gives
    the noiseless construction.
    """
    if task not in SYNTHETIC_TASKS:
        raise ValueError(f"unknown synthetic task {task!r}; choose from {SYNTHETIC_TASKS}")
    if n < 4:
        raise ValueError("synthetic tasks need n >= 4")
    rng = keyed_rng(seed, 0xDA7A)
    if task == "two_gaussians":
        y = np.arange(n) % 2
        means = np.where(y[:, None] == 1, [1.5, 0.0], [-1.5, 0.0])
        X = means + noise * rng.standard_normal((n, 2))
        return Dataset(X, y, 2)
    if task == "two_moons_like":
        y = np.arange(n) % 2
        t = rng.uniform(0.0, np.pi, n)
        X = np.where(
            y[:, None] == 0,
            np.stack([np.cos(t), np.sin(t)], axis=1),
            np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1),
        )
        X = X + 0.1 * noise * rng.standard_normal((n, 2))
        return Dataset(X, y, 2)
    d = 5
    w_true = rng.standard_normal(d)
    X = rng.standard_normal((n, d))
    y = X @ w_true + 0.1 * noise * rng.standard_normal(n)
    return Dataset(X, y, 0, {"w_true": w_true, "noise_std": 0.1 * noise})


class BatchSampler:
    """Shuffled without-replacement mini-batches, reshuffled every epoch.

    The permutation for epoch ``k`` depends only on ``(rng_seed, k)``. The
    last batch of an epoch may be short. ``batch_size`` can only be changed
    between epochs (before the first draw or after exhaustion).
    """

    def __init__(self, m: int, batch_size: int, rng_seed: int, stream: int = 0):
        if m < 1:
            raise ValueError("sampler needs m >= 1")
        self.m = m
        self.rng_seed = rng_seed
        self.stream = stream
        self.epoch = -1
        self.permutation = np.arange(m)
        self.cursor = m
        self._batch_size = 0
        self.batch_size = batch_size
        self.reset()

    @property
    def batch_size(self) -> int:
        return self._batch_size

    @batch_size.setter
    def batch_size(self, value: int):
        value = int(value)
        if value < 1:
            raise ValueError(f"batch size must be >= 1, got {value}")
        if 0 < self.cursor < self.m:
            raise RuntimeError("batch size can only change at an epoch boundary")
        self._batch_size = value

    @property
    def exhausted(self) -> bool:
        return self.cursor >= self.m

    @property
    def batches_per_epoch(self) -> int:
        return math.ceil(self.m / self._batch_size)

    def reset(self) -> None:
        """Start the next epoch with a fresh permutation."""
        self.epoch += 1
        self.permutation = keyed_rng(self.rng_seed, self.stream, self.epoch).permutation(self.m)
        self.cursor = 0

    def next_indices(self) -> np.ndarray:
        if self.exhausted:
            raise SamplerExhausted("epoch exhausted; call reset() first")
        idx = self.permutation[self.cursor:self.cursor + self._batch_size]
        self.cursor += len(idx)
        return idx

    def epoch_batches(self):
        while not self.exhausted:
            yield self.next_indices()


def next_batch(sampler: BatchSampler, dataset: Dataset):
    idx = sampler.next_indices()
    return dataset.inputs[idx], dataset.labels[idx]


class CyclingSampler(BatchSampler):
    """Fixed-size draws that roll over into a fresh epoch automatically."""

    def next_indices(self) -> np.ndarray:
        if self.exhausted:
            self.reset()
        return super().next_indices()
