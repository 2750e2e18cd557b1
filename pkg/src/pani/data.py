"""Datasets: IDX files, synthetic class-template images, and SSL splits."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from pani.errors import ConfigError, FormatError, TruncatedFileError

IMAGES_MAGIC = b"\x00\x00\x08\x03"
LABELS_MAGIC = b"\x00\x00\x08\x01"

PathOrBytes = Union[str, os.PathLike, bytes]


@dataclass
class Dataset:
    images: np.ndarray  # [M, C, H, W] in [0, 1]
    labels: np.ndarray  # [M] int

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ConfigError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx])


@dataclass
class SslSplit:
    labeled: np.ndarray
    unlabeled: np.ndarray
    test: np.ndarray


def _read_bytes(src: PathOrBytes) -> bytes:
    if isinstance(src, (bytes, bytearray)):
        return bytes(src)
    with open(src, "rb") as fh:
        return fh.read()


def parse_idx(raw: bytes, magic: bytes) -> np.ndarray:
    """Parse an unsigned-byte IDX blob whose first four bytes must equal ``magic``."""
    if len(raw) < 4:
        raise TruncatedFileError(f"IDX header needs 4 bytes, file has {len(raw)}")
    for offset, (got, want) in enumerate(zip(raw[:4], magic)):
        if got != want:
            raise FormatError(f"bad IDX magic at byte offset {offset}: 0x{got:02x}, expected 0x{want:02x}")
    ndim = magic[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(f"IDX header needs {header} bytes, file has {len(raw)}")
    shape = struct.unpack(">" + "I" * ndim, raw[4:header])
    size = int(np.prod(shape))
    if len(raw) - header < size:
        raise TruncatedFileError(f"IDX payload needs {size} bytes, file has {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(shape)


def load_idx(images_path: PathOrBytes, labels_path: PathOrBytes) -> Dataset:
    """Single-channel u8 images scaled to [0, 1] and their labels."""
    images = parse_idx(_read_bytes(images_path), IMAGES_MAGIC)
    labels = parse_idx(_read_bytes(labels_path), LABELS_MAGIC)
    return Dataset(images[:, None, :, :].astype(np.float64) / 255.0, labels.astype(np.int64))


def encode_idx(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise FormatError(f"IDX writer handles uint8 only, got {array.dtype}")
    return struct.pack("BBBB", 0, 0, 0x08, array.ndim) + struct.pack(">" + "I" * array.ndim, *array.shape) \
        + array.tobytes()


def save_idx(path, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_idx(array))


def class_templates(num_classes: int, shape: tuple, separation: float, rng: np.random.Generator,
                    n_waves: int = 4, max_freq: int = 4) -> np.ndarray:
    """Per-class patterns: sums of random cosines (frequency <= max_freq) around 0.5."""
    c, h, w = shape
    yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    # stay below Nyquist so no wave degenerates on small images
    top = max(1, min(max_freq, (min(h, w) - 1) // 2))
    freqs = [(u, v) for u in range(top + 1) for v in range(top + 1) if (u, v) != (0, 0)]
    out = np.empty((num_classes, c, h, w))
    for k in range(num_classes):
        for ch in range(c):
            pattern = np.zeros((h, w))
            for _ in range(n_waves):
                u, v = freqs[rng.integers(len(freqs))]
                phase = rng.uniform(0, 2 * np.pi)
                pattern += rng.normal() * np.cos(2 * np.pi * (u * yy + v * xx) + phase)
            pattern = (pattern - pattern.mean()) / (pattern.std() + 1e-12)
            out[k, ch] = pattern
    return 0.5 + 0.05 * separation * out


def generate_synthetic(num_classes: int, per_class: int, shape: tuple, separation: float,
                       rng: np.random.Generator, noise: float = 0.1) -> Dataset:
    """Class template plus Gaussian pixel noise, clipped to [0, 1], in shuffled order."""
    if not separation >= 0:
        raise ConfigError(f"separation must be >= 0, got {separation}")
    templates = class_templates(num_classes, tuple(shape), separation, rng)
    labels = np.repeat(np.arange(num_classes), per_class)
    images = templates[labels] + rng.normal(0.0, noise, size=(labels.shape[0],) + tuple(shape))
    order = rng.permutation(labels.shape[0])
    return Dataset(np.clip(images[order], 0.0, 1.0), labels[order].astype(np.int64))


def split_ssl(dataset: Dataset, n_labeled: int, n_test: int, rng: np.random.Generator,
              n_unlabeled: Optional[int] = None, num_classes: Optional[int] = None) -> SslSplit:
    """Test set first, then a class-stratified labeled set; the rest is unlabeled.

    Classes ``0 .. n_labeled % C - 1`` receive one extra labeled sample.
    """
    m = len(dataset)
    if n_labeled < 0 or n_test < 0 or n_labeled + n_test > m:
        raise ConfigError(f"cannot take {n_labeled} labeled + {n_test} test samples from {m}")
    num_classes = num_classes or dataset.num_classes
    perm = rng.permutation(m)
    test, rest = perm[:n_test], perm[n_test:]
    base, extra = divmod(n_labeled, num_classes)
    labeled = []
    for c in range(num_classes):
        want = base + (1 if c < extra else 0)
        members = rest[dataset.labels[rest] == c]
        if members.shape[0] < want:
            raise ConfigError(f"class {c} has {members.shape[0]} samples, {want} labeled requested")
        labeled.append(members[:want])
    labeled = np.sort(np.concatenate(labeled)) if labeled else np.array([], dtype=np.int64)
    unlabeled = rest[~np.isin(rest, labeled)]
    if n_unlabeled is not None:
        if n_unlabeled > unlabeled.shape[0]:
            raise ConfigError(f"only {unlabeled.shape[0]} unlabeled samples left, {n_unlabeled} requested")
        unlabeled = unlabeled[:n_unlabeled]
    return SslSplit(labeled.astype(np.int64), np.sort(unlabeled).astype(np.int64), np.sort(test).astype(np.int64))
