"""Datasets: synthetic Gaussian blobs, IDX (MNIST) ingestion, device partitioning."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    features: np.ndarray  # (n, d) float64
    labels: np.ndarray  # (n,) int64

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise ValueError("features must be (n, d) with one label per row")

    def __len__(self):
        return len(self.labels)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx])


@dataclass(frozen=True)
class PartitionSpec:
    mode: str = "iid"  # "iid" | "label_shard"
    shards_per_device: int = 2
    seed: int = 0


def gen_synthetic(n_samples, n_features, n_classes, class_separation, seed) -> Dataset:
    """Unit-covariance Gaussian blobs.

    Class means sit on a line through the origin along a seeded random
    direction, ``class_separation`` apart. Collinear means make the class
    biases matter, which keeps linear models learning over many rounds
    instead of converging after the first gradient step.
    """
    if n_samples < n_classes:
        raise ValueError("n_samples must be >= n_classes")
    if not class_separation > 0:
        raise ValueError("class_separation must be positive")
    rng = np.random.default_rng(seed)
    direction = rng.normal(size=n_features)
    direction /= np.linalg.norm(direction)
    means = np.outer(np.arange(n_classes) * class_separation, direction)
    labels = np.arange(n_samples) % n_classes
    order = rng.permutation(n_samples)
    labels = labels[order]
    features = means[labels] + rng.normal(size=(n_samples, n_features))
    return Dataset(features, labels)


def train_test_split(dataset: Dataset, test_fraction=0.2, seed=0):
    order = np.random.default_rng(seed).permutation(len(dataset))
    n_test = int(round(len(dataset) * test_fraction))
    return dataset.subset(np.sort(order[n_test:])), dataset.subset(np.sort(order[:n_test]))


def _read_header(blob: bytes, magic: int, ndim: int, what: str):
    need = 4 * (1 + ndim)
    if len(blob) < need:
        raise FormatError(f"{what}: truncated header")
    found = struct.unpack(">I", blob[:4])[0]
    if found != magic:
        raise FormatError(f"{what}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", blob[4:need])
    size = int(np.prod(dims))
    if len(blob) - need < size:
        raise FormatError(f"{what}: truncated payload, need {size} bytes")
    return dims, np.frombuffer(blob, dtype=np.uint8, count=size, offset=need)


def load_idx(images_path, labels_path) -> Dataset:
    """Read an IDX image/label pair (as distributed for MNIST); pixels scaled to [0, 1]."""
    (count, rows, cols), pixels = _read_header(Path(images_path).read_bytes(), IDX_IMAGES_MAGIC, 3, "images")
    (n_labels,), labels = _read_header(Path(labels_path).read_bytes(), IDX_LABELS_MAGIC, 1, "labels")
    if count != n_labels:
        raise FormatError(f"{count} images but {n_labels} labels")
    features = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    return Dataset(features, labels.astype(np.int64))


def write_idx(images, labels, images_path, labels_path):
    """Write uint8 images (n, rows, cols) and labels (n,) as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">4I", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">2I", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


def partition(dataset: Dataset, n_devices: int, spec: PartitionSpec = PartitionSpec()) -> list[np.ndarray]:
    """Split sample indices into ``n_devices`` disjoint shards covering the dataset."""
    n = len(dataset)
    if n_devices < 1 or n_devices > n:
        raise ValueError(f"cannot split {n} samples across {n_devices} devices")
    rng = np.random.default_rng(spec.seed)
    if spec.mode == "iid":
        order = rng.permutation(n)
        return [np.sort(part) for part in np.array_split(order, n_devices)]
    if spec.mode != "label_shard":
        raise ValueError(f"unknown partition mode {spec.mode!r}")

    # sort by label, cut into n_devices * shards_per_device contiguous pieces,
    # deal them out at random so each device sees few labels
    n_pieces = n_devices * spec.shards_per_device
    if n_pieces > n:
        raise ValueError("more label shards than samples")
    by_label = np.lexsort((rng.permutation(n), dataset.labels))
    pieces = np.array_split(by_label, n_pieces)
    deal = rng.permutation(n_pieces)
    return [
        np.sort(np.concatenate([pieces[j] for j in deal[d * spec.shards_per_device:(d + 1) * spec.shards_per_device]]))
        for d in range(n_devices)
    ]
