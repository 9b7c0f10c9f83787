"""Datasets: CIFAR-10 binary files, synthetic Gaussian blobs, proxy subsets, augmentation."""
import os
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from ._kernels import round_half_away_np

RECORD_BYTES = 3073
IMAGE_BYTES = 3072
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) or (N, D), normalized
    labels: np.ndarray  # (N,) int64
    num_classes: int
    split: str = "train"
    mean: np.ndarray = field(default_factory=lambda: np.zeros(1))
    std: np.ndarray = field(default_factory=lambda: np.ones(1))
    source_indices: Optional[np.ndarray] = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise DatasetError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError(f"labels outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def class_counts(self):
        return np.bincount(self.labels, minlength=self.num_classes)

    @property
    def sample_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, idx, split=None):
        idx = np.asarray(idx)
        src = idx if self.source_indices is None else self.source_indices[idx]
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, split or self.split, self.mean, self.std, src)


@dataclass
class Batch:
    images: np.ndarray
    labels: np.ndarray
    indices: np.ndarray


# ---------------------------------------------------------------------------
# CIFAR-10 binary format
# ---------------------------------------------------------------------------

def parse_cifar_records(raw: bytes):
    """Split raw bytes into ``(labels uint8 (N,), pixels uint8 (N, 3, 32, 32))``."""
    if len(raw) % RECORD_BYTES:
        raise DatasetError(f"file length {len(raw)} is not a multiple of {RECORD_BYTES}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = rec[:, 0].copy()
    if labels.size and labels.max() > 9:
        raise DatasetError(f"label byte {int(labels.max())} > 9")
    pixels = rec[:, 1:].reshape(-1, 3, 32, 32).copy()
    return labels, pixels


def serialize_cifar_records(labels, pixels) -> bytes:
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    pixels = np.asarray(pixels, dtype=np.uint8).reshape(len(labels), IMAGE_BYTES)
    return np.concatenate([labels, pixels], axis=1).tobytes()


def _read_split(directory, names):
    missing = [n for n in names if not os.path.isfile(os.path.join(directory, n))]
    if missing:
        raise FileNotFoundError(
            f"CIFAR-10 directory {directory!r} is missing {missing}; "
            f"expected {list(CIFAR_TRAIN_FILES + CIFAR_TEST_FILES)}"
        )
    labels, pixels = [], []
    for n in names:
        with open(os.path.join(directory, n), "rb") as f:
            lab, pix = parse_cifar_records(f.read())
        labels.append(lab)
        pixels.append(pix)
    return np.concatenate(labels), np.concatenate(pixels)


def channel_stats(pixels):
    x = pixels.astype(np.float64) / 255.0
    return x.mean(axis=(0, 2, 3)), x.std(axis=(0, 2, 3))


def normalize(pixels, mean, std, dtype=np.float32):
    x = pixels.astype(np.float64) / 255.0
    return ((x - mean[None, :, None, None]) / std[None, :, None, None]).astype(dtype)


def load_cifar10_binary(directory, split="train", limit=None, stats=None):
    """Load one split; normalization constants come from the train split.

    ``limit`` caps the split at its first ``limit`` records. ``stats`` may pass
    precomputed ``(mean, std)`` to avoid rereading the train files.
    """
    if split not in ("train", "test"):
        raise ValueError(f"unknown split {split!r}")
    train = None
    if stats is None:
        train = _read_split(directory, CIFAR_TRAIN_FILES)
        stats = channel_stats(train[1])
    if split == "train":
        labels, pixels = train if train is not None else _read_split(directory, CIFAR_TRAIN_FILES)
    else:
        labels, pixels = _read_split(directory, CIFAR_TEST_FILES)
    if limit is not None:
        labels, pixels = labels[:limit], pixels[:limit]
    mean, std = stats
    return Dataset(normalize(pixels, mean, std), labels, 10, split, np.asarray(mean), np.asarray(std))


# ---------------------------------------------------------------------------
# synthetic blobs
# ---------------------------------------------------------------------------

def blob_directions(k, d, rng):
    """Unit vectors: orthonormal via QR when ``k <= d``, else normalized Gaussians."""
    g = rng.standard_normal((max(k, d), d))
    if k <= d:
        q, _ = np.linalg.qr(g[:d].T)
        return q.T[:k]
    g = g[:k]
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def synth_blobs(k, d, n_per_class, separation, noise_sigma, seed, split="train", dtype=np.float32):
    """Isotropic Gaussian classes centered at ``separation * direction_k``.

    Class means depend only on ``seed``; ``split`` seeds the sample noise, so
    train and test splits share geometry.
    """
    if k < 2 or d < 2 or n_per_class < 1:
        raise DatasetError(f"invalid blob sizes K={k}, D={d}, n={n_per_class}")
    if not separation > 0 or noise_sigma < 0:
        raise DatasetError("separation must be > 0 and noise_sigma >= 0")
    geo = np.random.default_rng([seed, 0])
    means = separation * blob_directions(k, d, geo)
    rng = np.random.default_rng([seed, 1 if split == "train" else 2])
    labels = np.repeat(np.arange(k), n_per_class)
    x = means[labels] + noise_sigma * rng.standard_normal((labels.size, d))
    perm = rng.permutation(labels.size)
    ds = Dataset(x[perm].astype(dtype), labels[perm], k, split, np.zeros(d), np.ones(d))
    ds.class_means = means
    return ds


# ---------------------------------------------------------------------------
# proxy subsets and batching
# ---------------------------------------------------------------------------

def subsample_proxy(dataset: Dataset, fraction, seed) -> Dataset:
    """Stratified subset with ``round(fraction * count)`` samples per class."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    rng = np.random.default_rng([seed, 7])
    picks = []
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == c)
        if idx.size == 0:
            continue
        take = int(round_half_away_np(fraction * idx.size))
        if take == 0:
            raise DatasetError(f"fraction {fraction} leaves class {c} ({idx.size} samples) empty")
        picks.append(rng.permutation(idx)[:take])
    chosen = np.sort(np.concatenate(picks))
    return dataset.subset(chosen, split=f"{dataset.split}-proxy")


def iterate_batches(dataset: Dataset, batch_size, seed=0, epoch=0, shuffle=True, drop_last=False) -> Iterator[Batch]:
    """Batches in an order fixed by ``(seed, epoch)``."""
    n = len(dataset)
    order = np.random.default_rng([seed, epoch, 11]).permutation(n) if shuffle else np.arange(n)
    stop = n - (n % batch_size) if drop_last and n >= batch_size else n
    for start in range(0, stop, batch_size):
        idx = order[start : start + batch_size]
        yield Batch(dataset.images[idx], dataset.labels[idx], idx)


def hflip(images, mask):
    out = images.copy()
    out[mask] = out[mask][..., ::-1]
    return out


def augment(images, rng, enabled=True, pad=4):
    """Reflect-pad, random crop back to the input size, random horizontal flip."""
    if not enabled:
        return images
    n, c, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect")
    oy = rng.integers(0, 2 * pad + 1, size=n)
    ox = rng.integers(0, 2 * pad + 1, size=n)
    flip = rng.random(n) < 0.5
    out = np.empty_like(images)
    for i in range(n):
        out[i] = padded[i, :, oy[i] : oy[i] + h, ox[i] : ox[i] + w]
    return hflip(out, flip)
