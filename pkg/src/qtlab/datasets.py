"""Deterministic desk-scale datasets: spirals, blobs, and IDX file ingestion."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np


@dataclass
class Dataset:
    name: str
    inputs: np.ndarray   # [N, ...] float64
    labels: np.ndarray   # [N] int64
    split: str
    seed: int
    n_classes: int

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise ValueError(f"{len(self.inputs)} inputs vs {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("label outside [0, n_classes)")

    def __len__(self) -> int:
        return len(self.labels)


def _split_80_20(name, inputs, labels, seed, n_classes):
    rng = np.random.default_rng([seed, 17])
    perm = rng.permutation(len(labels))
    cut = int(round(0.8 * len(labels)))
    train_idx, val_idx = perm[:cut], perm[cut:]
    train = Dataset(name, inputs[train_idx], labels[train_idx], "train", seed, n_classes)
    val = Dataset(name, inputs[val_idx], labels[val_idx], "val", seed, n_classes)
    return train, val


def make_spiral(n_per_class: int, classes: int, noise_sigma: float, seed: int):
    """Interleaved 2-D spirals, split 80/20 into (train, val).

    Radial noise is clipped at 3 sigma, so every point satisfies
    ||x|| <= 1 + 3*noise_sigma.
    """
    if n_per_class < 1 or classes < 2:
        raise ValueError("make_spiral requires n_per_class >= 1 and classes >= 2")
    rng = np.random.default_rng([seed, 11])
    points, labels = [], []
    for k in range(classes):
        base = (np.arange(n_per_class) + 1.0) / n_per_class  # radius in (0, 1]
        noise = np.clip(rng.normal(0.0, noise_sigma, n_per_class) if noise_sigma > 0
                        else np.zeros(n_per_class), -3.0 * noise_sigma, 3.0 * noise_sigma)
        radius = np.abs(base + noise)  # reflect at 0; stays within 1 + 3*sigma
        theta = 2.0 * np.pi * k / classes + 4.0 * base
        points.append(np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1))
        labels.append(np.full(n_per_class, k, dtype=np.int64))
    inputs = np.concatenate(points)
    labels = np.concatenate(labels)
    return _split_80_20(f"spiral{classes}", inputs, labels, seed, classes)


def blob_centers(classes: int, dim: int, separation: float, seed: int) -> np.ndarray:
    """Seeded random centers with pairwise distance >= separation."""
    rng = np.random.default_rng([seed, 13])
    half_width = max(3.0, separation)
    centers: list[np.ndarray] = []
    attempts = 0
    while len(centers) < classes:
        candidate = rng.uniform(-half_width, half_width, dim)
        if all(np.linalg.norm(candidate - c) >= separation for c in centers):
            centers.append(candidate)
        else:
            attempts += 1
            if attempts >= 1000:
                raise ValueError(f"could not place {classes} centers with separation "
                                 f"{separation} after 1000 attempts")
    return np.stack(centers)


def make_blobs(n_per_class: int, classes: int, dim: int, separation: float, seed: int):
    """Unit-variance Gaussian clusters at separated centers, split 80/20."""
    if dim < 1:
        raise ValueError("make_blobs requires dim >= 1")
    if n_per_class < 1 or classes < 2:
        raise ValueError("make_blobs requires n_per_class >= 1 and classes >= 2")
    centers = blob_centers(classes, dim, separation, seed)
    rng = np.random.default_rng([seed, 19])
    inputs = np.concatenate([centers[k] + rng.normal(0.0, 1.0, (n_per_class, dim))
                             for k in range(classes)])
    labels = np.concatenate([np.full(n_per_class, k, dtype=np.int64) for k in range(classes)])
    return _split_80_20(f"blobs{classes}d{dim}", inputs, labels, seed, classes)


IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Malformed IDX payload; message carries the failing byte offset."""


def parse_idx(path) -> np.ndarray:
    """Parse one big-endian IDX file of unsigned bytes into an ndarray."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4:
        raise IdxFormatError(f"{path}: truncated IDX header at byte 0 (need 4 magic bytes)")
    magic = struct.unpack(">I", blob[:4])[0]
    if magic not in (IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC):
        raise IdxFormatError(f"{path}: bad IDX magic 0x{magic:08x} at byte 0")
    ndim = magic & 0xFF
    header_len = 4 + 4 * ndim
    if len(blob) < header_len:
        raise IdxFormatError(f"{path}: truncated IDX dimension table at byte {len(blob)}")
    dims = struct.unpack(f">{ndim}I", blob[4:header_len])
    expected = header_len + int(np.prod(dims))
    if len(blob) < expected:
        raise IdxFormatError(f"{path}: truncated IDX payload at byte {len(blob)} "
                             f"(expected {expected} bytes)")
    return np.frombuffer(blob, dtype=np.uint8, count=int(np.prod(dims)),
                         offset=header_len).reshape(dims)


def read_idx(images_path, labels_path, split: str = "train", name: str = "idx",
             seed: int = 0) -> Dataset:
    """Load an MNIST-style IDX image/label file pair, pixels normalized to [0, 1]."""
    images = parse_idx(images_path)
    labels = parse_idx(labels_path)
    if images.ndim != 3:
        raise IdxFormatError(f"{images_path}: expected 3-D image payload, got {images.ndim}-D")
    if labels.ndim != 1:
        raise IdxFormatError(f"{labels_path}: expected 1-D label payload, got {labels.ndim}-D")
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"{images.shape[0]} images vs {labels.shape[0]} labels")
    inputs = images.astype(np.float64)[:, None, :, :] / 255.0
    return Dataset(name, inputs, labels.astype(np.int64), split, seed,
                   int(labels.max()) + 1 if labels.size else 0)


def iterate_batches(ds: Dataset, batch_size: int, seed: int, epoch: int):
    """Deterministic per-epoch shuffle; yields (inputs, labels) chunks."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    perm = np.random.default_rng([seed, 1, epoch]).permutation(len(ds))
    for start in range(0, len(ds), batch_size):
        idx = perm[start:start + batch_size]
        yield ds.inputs[idx], ds.labels[idx]
