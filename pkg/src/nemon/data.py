"""Datasets: MNIST IDX files and seeded Gaussian blobs.

Inputs are stored column-wise, ``inputs.shape == (r, m)``, one sample per
column, matching the ``U = [u_1, ..., u_m]`` layout used by the network code.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
# refuse headers that would describe more than 4 GiB of payload
_MAX_PAYLOAD = 1 << 32


class IdxError(ValueError):
    pass


class BadMagicError(IdxError):
    pass


class TruncatedPayloadError(IdxError):
    pass


class DimensionOverflowError(IdxError):
    pass


@dataclass(eq=False)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    split: str = "train"
    num_classes: int = 10

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=float)
        self.labels = np.asarray(self.labels, dtype=np.int64).ravel()
        if self.inputs.ndim != 2:
            raise ValueError("inputs must be an r x m matrix")
        m = self.inputs.shape[1]
        if m < 1:
            raise ValueError("dataset must hold at least one sample")
        if self.labels.shape != (m,):
            raise ValueError(f"{self.labels.shape[0]} labels for {m} samples")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    @property
    def size(self) -> int:
        return self.inputs.shape[1]

    @property
    def dim(self) -> int:
        return self.inputs.shape[0]

    def subset(self, count: int) -> "Dataset":
        """First ``count`` samples in stored order."""
        return Dataset(self.inputs[:, :count], self.labels[:count], self.split, self.num_classes)


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def parse_idx(data: bytes) -> np.ndarray:
    """Parse an unsigned-byte IDX container (images or labels).

    Image files come back as floats in [0, 1] with shape ``(count, rows, cols)``;
    label files as ``int64`` of shape ``(count,)``.
    """
    if len(data) < 4:
        raise TruncatedPayloadError("file shorter than the IDX magic number")
    (magic,) = struct.unpack_from(">I", data)
    if magic == IDX_IMAGES_MAGIC:
        ndim = 3
    elif magic == IDX_LABELS_MAGIC:
        ndim = 1
    else:
        raise BadMagicError(f"bad magic 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(data) < header:
        raise TruncatedPayloadError("truncated IDX header")
    dims = struct.unpack_from(f">{ndim}I", data, 4)
    total = 1
    for d in dims:
        total *= d
        if total > _MAX_PAYLOAD:
            raise DimensionOverflowError(f"dimensions {dims} overflow the payload limit")
    if len(data) - header < total:
        raise TruncatedPayloadError(
            f"payload has {len(data) - header} bytes, dimensions {dims} need {total}"
        )
    raw = np.frombuffer(data, dtype=np.uint8, count=total, offset=header).reshape(dims)
    if magic == IDX_IMAGES_MAGIC:
        return raw.astype(float) / 255.0
    return raw.astype(np.int64)


def load_idx(path) -> np.ndarray:
    """Read an IDX file (optionally gzip-compressed); see :func:`parse_idx`."""
    return parse_idx(_read_bytes(path))


def encode_idx(array) -> bytes:
    """Inverse of :func:`parse_idx` for uint8 payloads (3-D images or 1-D labels)."""
    a = np.asarray(array)
    if a.ndim == 3:
        magic = IDX_IMAGES_MAGIC
    elif a.ndim == 1:
        magic = IDX_LABELS_MAGIC
    else:
        raise ValueError("IDX encoding supports 3-D images or 1-D labels")
    if a.dtype != np.uint8:
        raise ValueError("IDX payload must be uint8")
    return struct.pack(f">I{a.ndim}I", magic, *a.shape) + a.tobytes()


def write_idx(path, array) -> None:
    path = Path(path)
    payload = encode_idx(array)
    if path.suffix == ".gz":
        # mtime=0 keeps the compressed bytes reproducible
        with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as f:
            f.write(payload)
    else:
        path.write_bytes(payload)


def load_mnist(images_path, labels_path, count: int | None = None, split: str = "train") -> Dataset:
    images = load_idx(images_path)
    labels = load_idx(labels_path)
    if images.ndim != 3 or labels.ndim != 1:
        raise IdxError("expected an image file and a label file")
    if images.shape[0] != labels.shape[0]:
        raise IdxError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if count is not None:
        images, labels = images[:count], labels[:count]
    U = images.reshape(images.shape[0], -1).T
    return Dataset(np.ascontiguousarray(U), labels, split=split, num_classes=10)


@dataclass(frozen=True)
class SynthSpec:
    """Gaussian blobs; class means sit ``2 * margin * sigma`` apart pairwise."""

    classes: int = 2
    dim: int = 10
    count: int = 500
    margin: float = 3.0
    sigma: float = 1.0


def synth_dataset(spec: SynthSpec, seed: int, split: str = "train") -> Dataset:
    """Seeded Gaussian blobs with balanced classes.

    The means are scaled orthonormal directions (fixed by ``seed``), so every
    pair of classes is separated by a hyperplane at distance
    ``margin * sigma`` from each mean.
    """
    if spec.count < 1:
        raise ValueError("count must be positive")
    if spec.classes < 2 or spec.classes > spec.dim:
        raise ValueError("need 2 <= classes <= dim")
    means_rng = np.random.default_rng([seed, 0])
    Q, _ = np.linalg.qr(means_rng.standard_normal((spec.dim, spec.classes)))
    means = np.sqrt(2.0) * spec.margin * spec.sigma * Q
    rng = np.random.default_rng([seed, 1 if split == "train" else 2])
    labels = np.arange(spec.count) % spec.classes
    rng.shuffle(labels)
    U = means[:, labels] + spec.sigma * rng.standard_normal((spec.dim, spec.count))
    return Dataset(U, labels, split=split, num_classes=spec.classes)
