"""In-memory datasets, the RSDS binary dataset format and atomic writes."""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .rasters import LabeledSample

DATASET_MAGIC = b"RSDS"
DATASET_VERSION = 1
# magic, u16 version, u32 count, u16 height, u16 width, u16 channels, u16 K
_HEADER = struct.Struct("<4sHIHHHH")


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, C) uint8
    labels: np.ndarray  # (N,) int64
    n_classes: int
    sample_ids: np.ndarray | None = None

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, H, W, C), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        if self.sample_ids is None:
            self.sample_ids = np.arange(len(self.labels), dtype=np.int64)
        else:
            self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.n_classes, self.sample_ids[idx])

    def sample(self, i: int) -> LabeledSample:
        return LabeledSample(self.images[i].copy(), int(self.labels[i]), int(self.sample_ids[i]))

    @classmethod
    def from_samples(cls, samples, n_classes: int) -> "Dataset":
        samples = list(samples)
        if not samples:
            raise ValueError("no samples")
        return cls(
            np.stack([s.image for s in samples]),
            np.array([s.label for s in samples]),
            n_classes,
            np.array([s.sample_id for s in samples]),
        )


def atomic_write_bytes(path, data: bytes) -> None:
    """Write to a temporary file in the target directory, then rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def dataset_to_bytes(ds: Dataset) -> bytes:
    n, h, w, c = ds.images.shape
    header = _HEADER.pack(DATASET_MAGIC, DATASET_VERSION, n, h, w, c, ds.n_classes)
    rec = np.empty((n, 2 + h * w * c), dtype=np.uint8)
    rec[:, :2] = ds.labels.astype("<u2").view(np.uint8).reshape(n, 2)
    rec[:, 2:] = ds.images.reshape(n, -1)
    return header + rec.tobytes()


def dataset_from_bytes(blob: bytes) -> Dataset:
    if len(blob) < _HEADER.size:
        raise ValueError("dataset file too short")
    magic, version, n, h, w, c, k = _HEADER.unpack_from(blob)
    if magic != DATASET_MAGIC:
        raise ValueError("not a dataset file (bad magic)")
    if version != DATASET_VERSION:
        raise ValueError(f"unsupported dataset format version {version}")
    rec_len = 2 + h * w * c
    if len(blob) != _HEADER.size + n * rec_len:
        raise ValueError(f"dataset file length {len(blob)} != {_HEADER.size + n * rec_len}")
    rec = np.frombuffer(blob, dtype=np.uint8, offset=_HEADER.size).reshape(n, rec_len)
    labels = rec[:, :2].copy().view("<u2").reshape(n).astype(np.int64)
    images = rec[:, 2:].reshape(n, h, w, c).copy()
    return Dataset(images, labels, k)


def save_dataset(ds: Dataset, path) -> None:
    atomic_write_bytes(path, dataset_to_bytes(ds))


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        return dataset_from_bytes(fh.read())
