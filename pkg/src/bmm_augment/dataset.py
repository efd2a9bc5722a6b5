"""MNIST IDX files in and out, plus the binarized and [0, 1] views used downstream.

IDX layout (big endian)::

    u32   magic   (0x00000803 images, 0x00000801 labels)
    u32[] dims    (count, rows, cols for images; count for labels)
    u8[]  payload (row-major)
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    InsufficientData,
    LabelOutOfRange,
    LengthMismatch,
    TruncatedPayload,
    WrongMagic,
    ZeroDimension,
)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
GZIP_MAGIC = b"\x1f\x8b"
DEFAULT_THRESHOLD = 100


@dataclass(frozen=True, eq=False)
class ImageSet:
    """Grayscale digits, one flattened image per row (uint8, shape n x d)."""

    rows: np.ndarray
    width: int = 28
    height: int = 28

    def __post_init__(self):
        rows = np.asarray(self.rows)
        if rows.ndim != 2:
            raise ValueError(f"expected a 2-D pixel matrix, got shape {rows.shape}")
        if rows.shape[1] != self.width * self.height:
            raise ValueError(
                f"row length {rows.shape[1]} != {self.width}x{self.height}"
            )
        if rows.dtype != np.uint8:
            if rows.size and (rows.min() < 0 or rows.max() > 255):
                raise ValueError("pixel values must lie in [0, 255]")
            rows = rows.astype(np.uint8)
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def d(self) -> int:
        return self.rows.shape[1]

    def take(self, indices) -> "ImageSet":
        return ImageSet(self.rows[np.asarray(indices, dtype=np.intp)], self.width, self.height)

    def __eq__(self, other):
        if not isinstance(other, ImageSet):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and np.array_equal(self.rows, other.rows)
        )


@dataclass(frozen=True, eq=False)
class LabelSet:
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 1:
            raise ValueError("labels must be a 1-D sequence")
        if values.size and (values.min() < 0 or values.max() > 9):
            bad = values[(values < 0) | (values > 9)][0]
            raise LabelOutOfRange(f"label {int(bad)} outside 0..9")
        values = values.astype(np.uint8)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def take(self, indices) -> "LabelSet":
        return LabelSet(self.values[np.asarray(indices, dtype=np.intp)])

    def __eq__(self, other):
        if not isinstance(other, LabelSet):
            return NotImplemented
        return np.array_equal(self.values, other.values)


@dataclass(frozen=True, eq=False)
class BinaryImageSet:
    rows: np.ndarray
    threshold: int

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def d(self) -> int:
        return self.rows.shape[1]


@dataclass(frozen=True)
class SplitSpec:
    total: int = 10000
    train: int = 8000
    validation: int = 2000
    seed: int = 0
    policy: str = "head"  # "head" (file order) or "random" (seeded)

    def __post_init__(self):
        if self.train + self.validation != self.total:
            raise ValueError("train + validation must equal total")
        if self.total <= 0 or self.train <= 0 or self.validation < 0:
            raise ValueError("split counts must be positive")
        if self.policy not in ("head", "random"):
            raise ValueError(f"unknown split policy {self.policy!r}")


def _maybe_gunzip(data: bytes) -> bytes:
    if data[:2] == GZIP_MAGIC:
        return gzip.decompress(data)
    return data


def _read_header(data: bytes, magic: int, ndims: int) -> tuple[int, ...]:
    if len(data) < 4:
        raise TruncatedPayload("file shorter than the magic number")
    (found,) = struct.unpack(">I", data[:4])
    if found != magic:
        raise WrongMagic(f"magic 0x{found:08x}, expected 0x{magic:08x}")
    need = 4 * (1 + ndims)
    if len(data) < need:
        raise TruncatedPayload(f"header needs {need} bytes, got {len(data)}")
    dims = struct.unpack(f">{ndims}I", data[4:need])
    if any(dim == 0 for dim in dims):
        raise ZeroDimension(f"zero dimension in header {tuple(dims)}")
    return tuple(dims)


def parse_idx_images(data: bytes) -> ImageSet:
    data = _maybe_gunzip(bytes(data))
    count, rows, cols = _read_header(data, IMAGE_MAGIC, 3)
    size = count * rows * cols
    payload = data[16:]
    if len(payload) < size:
        raise TruncatedPayload(f"declared {size} pixel bytes, found {len(payload)}")
    pixels = np.frombuffer(payload, dtype=np.uint8, count=size).reshape(count, rows * cols)
    return ImageSet(pixels.copy(), width=cols, height=rows)


def parse_idx_labels(data: bytes) -> LabelSet:
    data = _maybe_gunzip(bytes(data))
    (count,) = _read_header(data, LABEL_MAGIC, 1)
    payload = data[8:]
    if len(payload) < count:
        raise TruncatedPayload(f"declared {count} labels, found {len(payload)}")
    return LabelSet(np.frombuffer(payload, dtype=np.uint8, count=count).copy())


def serialize_idx_images(images: ImageSet) -> bytes:
    header = struct.pack(">4I", IMAGE_MAGIC, images.n, images.height, images.width)
    return header + np.ascontiguousarray(images.rows, dtype=np.uint8).tobytes()


def serialize_idx_labels(labels: LabelSet) -> bytes:
    return struct.pack(">2I", LABEL_MAGIC, labels.n) + labels.values.tobytes()


def read_images(path) -> ImageSet:
    return parse_idx_images(Path(path).read_bytes())


def read_labels(path) -> LabelSet:
    return parse_idx_labels(Path(path).read_bytes())


def write_images(path, images: ImageSet) -> None:
    Path(path).write_bytes(serialize_idx_images(images))


def write_labels(path, labels: LabelSet) -> None:
    Path(path).write_bytes(serialize_idx_labels(labels))


def dataset_paths(prefix) -> tuple[Path, Path]:
    """Resolve ``PREFIX-images-idx3-ubyte`` / ``PREFIX-labels-idx1-ubyte``.

    A ``.gz`` variant is picked up when the raw file is missing, so
    ``/data/mnist/train`` works with either the stock or the gzipped download.
    """
    prefix = str(prefix)
    found = []
    for stem in (f"{prefix}-images-idx3-ubyte", f"{prefix}-labels-idx1-ubyte"):
        path = Path(stem)
        if not path.exists() and Path(stem + ".gz").exists():
            path = Path(stem + ".gz")
        found.append(path)
    return found[0], found[1]


def read_dataset(prefix) -> tuple[ImageSet, LabelSet]:
    image_path, label_path = dataset_paths(prefix)
    images, labels = read_images(image_path), read_labels(label_path)
    if images.n != labels.n:
        raise LengthMismatch(f"{images.n} images but {labels.n} labels under {prefix}")
    return images, labels


def write_dataset(prefix, images: ImageSet, labels: LabelSet) -> tuple[Path, Path]:
    image_path = Path(f"{prefix}-images-idx3-ubyte")
    label_path = Path(f"{prefix}-labels-idx1-ubyte")
    write_images(image_path, images)
    write_labels(label_path, labels)
    return image_path, label_path


def binarize(images: ImageSet, threshold: int = DEFAULT_THRESHOLD) -> BinaryImageSet:
    if not 1 <= threshold <= 255:
        raise ValueError("threshold must lie in [1, 255]")
    return BinaryImageSet((images.rows >= threshold).astype(np.uint8), threshold)


def normalize(images: ImageSet) -> np.ndarray:
    return images.rows.astype(np.float64) / 255.0


def split_indices(n_available: int, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray]:
    if spec.total > n_available:
        raise InsufficientData(f"split needs {spec.total} records, source has {n_available}")
    if spec.policy == "head":
        order = np.arange(spec.total)
    else:
        rng = np.random.default_rng(spec.seed)
        order = rng.choice(n_available, size=spec.total, replace=False)
    return order[: spec.train], order[spec.train:]


def subset_split(images: ImageSet, labels: LabelSet, spec: SplitSpec):
    """Return ``((train_images, train_labels), (val_images, val_labels))``."""
    if images.n != labels.n:
        raise LengthMismatch(f"{images.n} images but {labels.n} labels")
    train_idx, val_idx = split_indices(images.n, spec)
    return (
        (images.take(train_idx), labels.take(train_idx)),
        (images.take(val_idx), labels.take(val_idx)),
    )
