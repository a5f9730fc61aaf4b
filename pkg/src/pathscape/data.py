"""Datasets: IDX file ingestion and small synthetic feature-location tasks."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
SYNTH_KINDS = ("centered_blob_vs_corner_blob", "translated_bar")


class IdxFormatError(ValueError):
    """An IDX file has the wrong magic number, a truncated payload, or mismatched counts."""


@dataclass
class Dataset:
    """Images ``(M, channels, *spatial)`` in [0, 1] and integer labels ``(M,)``."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    provenance: str = "synthetic"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def sample_shape(self) -> tuple:
        return self.images.shape[1:]

    def subset(self, index, split: str | None = None) -> "Dataset":
        return Dataset(self.images[index], self.labels[index], self.num_classes, split or self.split, self.provenance)

    def split_at(self, n_train: int) -> tuple:
        train = self.subset(slice(0, n_train), "train")
        val = self.subset(slice(n_train, None), "validation")
        return train, val


def _read_idx(path, magic: int) -> tuple:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise IdxFormatError(f"{path}: file too short for an IDX header ({len(raw)} bytes)")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise IdxFormatError(f"{path}: magic number 0x{found:08x}, expected 0x{magic:08x}")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{path}: header needs {header} bytes, file has {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = header + int(np.prod(dims))
    if len(raw) != expected:
        raise IdxFormatError(f"{path}: expected {expected} bytes for dimensions {dims}, found {len(raw)}")
    return dims, np.frombuffer(raw, dtype=np.uint8, offset=header)


def load_idx(path_images, path_labels, num_classes: int | None = None) -> Dataset:
    """Unsigned-byte IDX image and label files, pixels scaled to [0, 1].

    Images of shape ``(M, H, W)`` become single-channel ``(M, 1, H, W)``.
    """
    dims, pixels = _read_idx(path_images, IMAGE_MAGIC)
    (count,), labels = _read_idx(path_labels, LABEL_MAGIC)
    if dims[0] != count:
        raise IdxFormatError(f"{dims[0]} images but {count} labels")
    images = pixels.reshape(dims[0], 1, *dims[1:]).astype(np.float64) / 255.0
    labels = labels.astype(np.int64)
    d = num_classes if num_classes is not None else (int(labels.max()) + 1 if len(labels) else 1)
    return Dataset(images, labels, d, provenance="idx_files")


def write_idx(path_images, path_labels, images: np.ndarray, labels: np.ndarray) -> None:
    """Write ``(M, H, W)`` uint8 images and ``(M,)`` uint8 labels as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path_images, "wb") as fh:
        fh.write(struct.pack(">I", IMAGE_MAGIC)[:3] + bytes([images.ndim]))
        fh.write(struct.pack(f">{images.ndim}I", *images.shape))
        fh.write(images.tobytes())
    with open(path_labels, "wb") as fh:
        fh.write(struct.pack(">I", LABEL_MAGIC)[:3] + bytes([1]))
        fh.write(struct.pack(">I", len(labels)))
        fh.write(labels.tobytes())


def _balanced_labels(count: int, rng: np.random.Generator) -> np.ndarray:
    labels = np.arange(count) % 2
    rng.shuffle(labels)
    return labels


def synth_dataset(kind: str, count: int, extent, seed: int, noise: float = 0.1, channels: int = 1) -> Dataset:
    """Two-class synthetic images, deterministic per seed and exactly balanced (±1).

    ``translated_bar``: class 0 holds a horizontal bar, class 1 a vertical bar, at a
    position drawn uniformly over all placements. Rank-1 extents use a flat segment
    versus a spike pair.

    ``centered_blob_vs_corner_blob``: a Gaussian blob at the centre (class 0) or in a
    uniformly chosen corner (class 1).
    """
    if kind not in SYNTH_KINDS:
        raise ValueError(f"unknown synthetic kind {kind!r}; choose from {SYNTH_KINDS}")
    extent = (extent,) if np.ndim(extent) == 0 else tuple(int(n) for n in extent)
    rng = np.random.default_rng(seed)
    labels = _balanced_labels(count, rng)
    images = np.zeros((count, channels) + extent)
    if kind == "translated_bar":
        _draw_bars(images, labels, rng)
    else:
        _draw_blobs(images, labels, rng)
    images += noise * rng.standard_normal(images.shape)
    np.clip(images, 0.0, 1.0, out=images)
    return Dataset(images, labels, 2)


def bar_length(extent: tuple) -> int:
    return max(2, min(extent) // 2)


def _draw_bars(images: np.ndarray, labels: np.ndarray, rng: np.random.Generator) -> None:
    extent = images.shape[2:]
    length = bar_length(extent)
    if len(extent) == 1:
        (n,) = extent
        for m, y in enumerate(labels):
            start = rng.integers(0, n - length + 1)
            if y == 0:
                images[m, :, start:start + length] = 1.0
            else:
                images[m, :, start] = 1.0
                images[m, :, start + length - 1] = 1.0
        return
    h, w = extent
    for m, y in enumerate(labels):
        if y == 0:
            r, c = rng.integers(0, h), rng.integers(0, w - length + 1)
            images[m, :, r, c:c + length] = 1.0
        else:
            r, c = rng.integers(0, h - length + 1), rng.integers(0, w)
            images[m, :, r:r + length, c] = 1.0


def _draw_blobs(images: np.ndarray, labels: np.ndarray, rng: np.random.Generator) -> None:
    extent = images.shape[2:]
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in extent], indexing="ij")
    width = max(1.0, min(extent) / 6.0)
    for m, y in enumerate(labels):
        if y == 0:
            centre = [(n - 1) / 2.0 for n in extent]
        else:
            corner = rng.integers(0, 2, size=len(extent))
            centre = [c * (n - 1) for c, n in zip(corner, extent)]
        dist = sum((g - c) ** 2 for g, c in zip(grids, centre))
        images[m, :] = np.exp(-dist / (2.0 * width**2))


def parse_data_source(source: str, count: int, extent, seed: int) -> Dataset:
    """``synth:KIND`` or ``idx:IMAGES,LABELS``."""
    scheme, _, rest = source.partition(":")
    if scheme == "synth":
        return synth_dataset(rest, count, extent, seed)
    if scheme == "idx":
        parts = rest.split(",")
        if len(parts) != 2:
            raise ValueError("idx data source needs IMAGES,LABELS")
        return load_idx(os.path.expanduser(parts[0]), os.path.expanduser(parts[1]))
    raise ValueError(f"unknown data source {source!r}; use synth:KIND or idx:IMAGES,LABELS")
