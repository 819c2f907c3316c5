"""Datasets: IDX ingestion, synthetic Gaussian blobs, and client partitioning."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np

from .errors import CountMismatch, MalformedIdx, NotIdx, TooManyClients

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        y = np.array(self.labels, dtype=np.int64).reshape(-1)
        if x.shape[0] != y.shape[0]:
            raise CountMismatch(f"{x.shape[0]} feature rows vs {y.shape[0]} labels")
        if self.n_classes <= 0:
            raise ValueError("n_classes must be positive")
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def n_features(self) -> int:
        return int(self.features.shape[1])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.n_classes)


def _read_idx(path, magic: int) -> tuple[tuple[int, ...], bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise MalformedIdx(f"{path}: shorter than an IDX header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise NotIdx(f"{path}: magic {found:#010x}, expected {magic:#010x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise MalformedIdx(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    payload = raw[header:]
    if len(payload) != int(np.prod(dims)):
        raise MalformedIdx(f"{path}: payload has {len(payload)} bytes, header promises {int(np.prod(dims))}")
    return dims, payload


def load_idx(images_path, labels_path, n_classes: int = 10) -> Dataset:
    """Load an MNIST-style image/label IDX pair, scaling pixels into [0, 1]."""
    img_dims, img = _read_idx(images_path, IDX_IMAGES_MAGIC)
    lbl_dims, lbl = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if img_dims[0] != lbl_dims[0]:
        raise CountMismatch(f"{img_dims[0]} images vs {lbl_dims[0]} labels")
    n = img_dims[0]
    pixels = np.frombuffer(img, dtype=np.uint8).reshape(n, -1).astype(np.float64) / 255.0
    labels = np.frombuffer(lbl, dtype=np.uint8).astype(np.int64)
    return Dataset(pixels, labels, n_classes)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images (n, rows, cols) and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


def synth_blobs(n_classes: int, n_per_class: int, n_features: int, spread: float, seed: int) -> Dataset:
    """Isotropic Gaussian clusters; centers are drawn uniformly from [0, 1]^d.

    Samples are ordered by class. Features are not clipped, so with a large
    spread they can leave [0, 1].
    """
    if min(n_classes, n_per_class, n_features) <= 0:
        raise ValueError("counts must be positive")
    if spread < 0:
        raise ValueError("spread must be non-negative")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.0, 1.0, size=(n_classes, n_features))
    noise = rng.normal(0.0, 1.0, size=(n_classes, n_per_class, n_features)) * spread
    x = (centers[:, None, :] + noise).reshape(-1, n_features)
    y = np.repeat(np.arange(n_classes), n_per_class)
    return Dataset(x, y, n_classes)


def train_test_split(data: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must be in (0, 1)")
    order = np.random.default_rng(seed).permutation(len(data))
    n_test = max(1, int(round(len(data) * test_fraction)))
    return data.subset(np.sort(order[n_test:])), data.subset(np.sort(order[:n_test]))


@dataclass(frozen=True)
class PartitionPlan:
    mode: Literal["iid", "label-shard"] = "iid"
    n_clients: int = 10
    shards_per_client: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("iid", "label-shard"):
            raise ValueError(f"unknown partition mode {self.mode!r}")
        if self.n_clients < 1 or self.shards_per_client < 1:
            raise ValueError("n_clients and shards_per_client must be >= 1")


def _cut(n: int, parts: int) -> list[tuple[int, int]]:
    # equal slices, remainder appended to the last one
    size = n // parts
    bounds = [(i * size, (i + 1) * size) for i in range(parts)]
    bounds[-1] = (bounds[-1][0], n)
    return bounds


def partition_indices(data: Dataset, plan: PartitionPlan) -> list[np.ndarray]:
    n = len(data)
    if plan.n_clients > n:
        raise TooManyClients(f"{plan.n_clients} clients for {n} samples")
    rng = np.random.default_rng(plan.seed)
    if plan.mode == "iid":
        order = rng.permutation(n)
        return [order[a:b] for a, b in _cut(n, plan.n_clients)]

    n_shards = plan.n_clients * plan.shards_per_client
    if n_shards > n:
        raise TooManyClients(f"{n_shards} shards for {n} samples")
    by_label = np.argsort(data.labels, kind="stable")
    shards = [by_label[a:b] for a, b in _cut(n, n_shards)]
    dealt = rng.permutation(n_shards)
    k = plan.shards_per_client
    return [np.concatenate([shards[s] for s in dealt[c * k : (c + 1) * k]]) for c in range(plan.n_clients)]


def partition(data: Dataset, plan: PartitionPlan) -> list[Dataset]:
    return [data.subset(idx) for idx in partition_indices(data, plan)]
