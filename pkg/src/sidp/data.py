"""Datasets: IDX (MNIST format) I/O, synthetic blobs, Poisson lots, public batches."""

from __future__ import annotations

import gzip
import hashlib
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

log = logging.getLogger(__name__)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxError(ValueError):
    pass


class DisjointnessError(ValueError):
    pass


def _row_hashes(images: np.ndarray) -> list[str]:
    flat = np.ascontiguousarray(images.reshape(len(images), -1), dtype=np.float64)
    return [hashlib.sha256(row.tobytes()).hexdigest() for row in flat]


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # [N, H, W] in [0, 1]
    labels: np.ndarray  # [N] int

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if images.ndim != 3:
            raise ValueError(f"images must be [N, H, W], got {images.shape}")
        if len(images) != len(labels):
            raise ValueError(f"{len(images)} images but {len(labels)} labels")
        if images.size and (images.min() < 0 or images.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")
        if labels.size and labels.min() < 0:
            raise ValueError("labels must be nonnegative")
        images.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx])

    def content_hashes(self) -> list[str]:
        return _row_hashes(self.images)


# ---------------------------------------------------------------------------
# IDX format


def _open(path: Path, mode: str):
    path = Path(path)
    return gzip.open(path, mode) if path.suffix == ".gz" else open(path, mode)


def read_idx(path, expected_magic: int | None = None) -> np.ndarray:
    """Parse an unsigned-byte IDX file (optionally gzipped) into a uint8 array."""
    with _open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IdxError(f"{path}: truncated file (no header)")
    (magic,) = struct.unpack(">I", raw[:4])
    if expected_magic is not None and magic != expected_magic:
        raise IdxError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    if magic >> 8 != 0x08:
        raise IdxError(f"{path}: unsupported IDX element type in magic 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxError(f"{path}: truncated file (header)")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims)) if dims else 1
    body = raw[header:]
    if len(body) < count:
        raise IdxError(f"{path}: truncated file, expected {count} bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8, count=count).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise IdxError("only unsigned-byte IDX files are written")
    magic = (0x08 << 8) | array.ndim
    header = struct.pack(f">I{array.ndim}I", magic, *array.shape)
    with _open(path, "wb") as fh:
        fh.write(header + np.ascontiguousarray(array).tobytes())


def load_idx(images_path, labels_path) -> Dataset:
    images = read_idx(images_path, IMAGE_MAGIC)
    labels = read_idx(labels_path, LABEL_MAGIC)
    if len(images) != len(labels):
        raise IdxError(f"count mismatch: {len(images)} images vs {len(labels)} labels")
    return Dataset(images.astype(np.float64) / 255.0, labels.astype(np.int64))


def save_idx(dataset: Dataset, images_path, labels_path) -> None:
    """Write a dataset whose pixels lie on the 1/255 grid."""
    q = np.rint(dataset.images * 255.0)
    if not np.array_equal(q / 255.0, dataset.images):
        raise IdxError("pixels are not multiples of 1/255; IDX cannot store them exactly")
    if len(dataset) and dataset.labels.max() > 255:
        raise IdxError("labels do not fit in a byte")
    write_idx(images_path, q.astype(np.uint8))
    write_idx(labels_path, dataset.labels.astype(np.uint8))


def _find(data_dir: Path, stem: str) -> Path | None:
    for name in (stem, stem + ".gz"):
        if (data_dir / name).exists():
            return data_dir / name
    return None


def load_split(data_dir, prefix: str) -> Dataset:
    """Load ``<prefix>-images-idx3-ubyte[.gz]`` and its label file from ``data_dir``."""
    data_dir = Path(data_dir)
    img = _find(data_dir, f"{prefix}-images-idx3-ubyte")
    lab = _find(data_dir, f"{prefix}-labels-idx1-ubyte")
    if img is None or lab is None:
        raise FileNotFoundError(f"no IDX pair with prefix {prefix!r} in {data_dir}")
    return load_idx(img, lab)


def has_split(data_dir, prefix: str) -> bool:
    data_dir = Path(data_dir)
    return _find(data_dir, f"{prefix}-images-idx3-ubyte") is not None


# ---------------------------------------------------------------------------
# synthetic data


def synthetic_classification(n: int, dims: int, classes: int, seed: int,
                             spacing: float = 3.0, spread: float = 0.5) -> Dataset:
    """Gaussian class blobs, min-max scaled onto the 1/255 pixel grid.

    Images have shape [n, 1, dims].  Class centres sit ``spacing`` apart along
    distinct axes while ``classes <= dims``.
    """
    if n <= 0 or dims <= 0 or classes <= 0:
        raise ValueError("n, dims and classes must be positive")
    rng = np.random.default_rng(seed)
    centers = np.zeros((classes, dims))
    for k in range(classes):
        if k < dims:
            centers[k, k] = spacing
        else:
            d = rng.normal(size=dims)
            centers[k] = spacing * d / np.linalg.norm(d)
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    x = centers[labels] + spread * rng.normal(size=(n, dims))
    lo, hi = x.min(), x.max()
    x = (x - lo) / (hi - lo) if hi > lo else np.zeros_like(x)
    x = np.rint(x * 255.0) / 255.0
    return Dataset(x.reshape(n, 1, dims), labels)


# ---------------------------------------------------------------------------
# lots and public data


class LotSampler:
    """Poisson lot sampling: each example joins a lot independently with prob. q."""

    def __init__(self, q: float, rng: np.random.Generator):
        if not 0 < q <= 1:
            raise ValueError("inclusion probability must be in (0, 1]")
        self.q = q
        self.rng = rng

    def sample(self, n: int) -> np.ndarray:
        return np.flatnonzero(self.rng.random(n) < self.q)


def batches(n: int, batch_size: int, rng: np.random.Generator | None = None) -> Iterable[np.ndarray]:
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


@dataclass(frozen=True)
class PublicBatch:
    images: np.ndarray  # [M, H, W]
    hashes: frozenset = field(repr=False)
    digest: str = ""

    @classmethod
    def from_images(cls, images: np.ndarray) -> "PublicBatch":
        images = np.array(images, dtype=np.float64)
        if len(images) < 2:
            raise ValueError("a public batch needs at least 2 points")
        images.flags.writeable = False
        digest = hashlib.sha256(np.ascontiguousarray(images).tobytes()).hexdigest()
        return cls(images, frozenset(_row_hashes(images)), digest)

    def __len__(self) -> int:
        return len(self.images)

    def check_disjoint(self, dataset: Dataset) -> None:
        overlap = self.hashes.intersection(dataset.content_hashes())
        if overlap:
            raise DisjointnessError(f"{len(overlap)} public points also appear in the training set")


def load_public_batch(source: Dataset, m: int, seed: int,
                      train: Dataset | None = None) -> PublicBatch:
    """Draw ``m`` fixed points from ``source``; reject any that occur in ``train``."""
    if m < 2:
        raise ValueError("a public batch needs at least 2 points")
    if m > len(source):
        raise ValueError(f"requested {m} public points from a pool of {len(source)}")
    idx = np.sort(np.random.default_rng(seed).choice(len(source), size=m, replace=False))
    batch = PublicBatch.from_images(source.images[idx])
    if train is not None:
        batch.check_disjoint(train)
    return batch


@dataclass(frozen=True)
class Corpus:
    train: Dataset
    test: Dataset
    public_pool: Dataset | None
    public_source: str


def load_corpus(data_dir, public_dir=None) -> Corpus:
    """Train/test IDX pairs plus a pool for public batches.

    The pool comes from ``public_dir`` (a different corpus) when given, else
    from a ``public-*`` IDX pair in ``data_dir``, else from the tail of the
    test split (with a warning, since it is the same corpus).
    """
    data_dir = Path(data_dir)
    train = load_split(data_dir, "train")
    test = load_split(data_dir, "t10k")
    if public_dir is not None:
        return Corpus(train, test, load_split(public_dir, "train"), f"external:{public_dir}")
    if has_split(data_dir, "public"):
        return Corpus(train, test, load_split(data_dir, "public"), "held-out")
    log.info("no public pool found; reserving the last 500 test points as public data")
    k = min(500, len(test) // 2)
    return Corpus(train, test.subset(slice(0, len(test) - k)),
                  test.subset(slice(len(test) - k, None)), "test-tail")
