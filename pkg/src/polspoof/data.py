"""Datasets, the batching schedule and batch signatures.

Binary cache layout (all little-endian)::

    b"POLD" | u16 version | u64 n | u64 d | n*d f64 features (row-major) | n i64 labels
"""

from __future__ import annotations

import csv
import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from polspoof.errors import DatasetError, ScheduleError

POLD_MAGIC = b"POLD"
POLD_VERSION = 1
_HEADER = struct.Struct("<4sHQQ")

EMPTY_SHA256 = "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"


def _encode(features: np.ndarray, labels: np.ndarray) -> bytes:
    return (np.ascontiguousarray(features, dtype="<f8").tobytes()
            + np.ascontiguousarray(labels, dtype="<i8").tobytes())


def content_id(features: np.ndarray, labels: np.ndarray) -> str:
    return "sha256:" + hashlib.sha256(_encode(features, labels)).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    id: str = ""

    def __post_init__(self):
        X = np.array(self.features, dtype=np.float64, copy=True)
        y = np.array(self.labels, copy=True)
        if X.ndim != 2:
            raise DatasetError("features must be an n x d matrix")
        if y.ndim != 1 or y.shape[0] != X.shape[0]:
            raise DatasetError(f"{X.shape[0]} feature rows but {y.shape} labels")
        if y.size and not np.issubdtype(y.dtype, np.integer):
            if not np.all(np.equal(np.mod(y, 1), 0)):
                raise DatasetError("labels must be integers")
        y = y.astype(np.int64)
        if y.size and y.min() < 0:
            raise DatasetError("labels must be non-negative")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        if not self.id:
            object.__setattr__(self, "id", content_id(X, y))

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0

    def batch(self, idx) -> tuple[np.ndarray, np.ndarray]:
        idx = np.asarray(idx, dtype=np.int64)
        return self.features[idx], self.labels[idx]

    def subset(self, idx) -> Dataset:
        X, y = self.batch(idx)
        return Dataset(X, y)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (np.array_equal(self.features, other.features)
                and np.array_equal(self.labels, other.labels))


# -- generators --------------------------------------------------------------


def make_blobs(n: int, dim: int = 2, classes: int = 2, spread: float = 1.0,
               separation: float = 3.0, seed: int = 0) -> Dataset:
    """Isotropic Gaussian clusters with centres drawn on a sphere of radius ``separation``."""
    rng = np.random.default_rng(seed)
    centres = rng.standard_normal((classes, dim))
    centres *= separation / np.linalg.norm(centres, axis=1, keepdims=True)
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    X = centres[labels] + spread * rng.standard_normal((n, dim))
    return Dataset(X, labels)


def make_moons(n: int, noise: float = 0.1, seed: int = 0) -> Dataset:
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    rng.shuffle(labels)
    theta = rng.uniform(0.0, np.pi, n)
    X = np.empty((n, 2))
    X[:, 0] = np.where(labels == 0, np.cos(theta), 1.0 - np.cos(theta))
    X[:, 1] = np.where(labels == 0, np.sin(theta), 0.5 - np.sin(theta))
    X += noise * rng.standard_normal((n, 2))
    return Dataset(X, labels)


# -- schedule and signatures -------------------------------------------------


def get_batches(D: Dataset, S: int, batch: int, seed) -> list[np.ndarray]:
    """``S`` disjoint batches drawn from one seeded permutation of the rows."""
    if S < 0 or batch <= 0:
        raise ScheduleError("need S >= 0 and batch > 0")
    if S * batch > len(D):
        raise ScheduleError(f"{S} batches of {batch} need {S * batch} rows; dataset has {len(D)}")
    perm = np.random.default_rng(seed).permutation(len(D))
    return [perm[s * batch:(s + 1) * batch].copy() for s in range(S)]


def sign_batch(D: Dataset, idx) -> bytes:
    X, y = D.batch(idx)
    return hashlib.sha256(_encode(X, y)).digest()


def verify_signature(D: Dataset, idx, h: bytes) -> bool:
    try:
        return sign_batch(D, idx) == bytes(h)
    except IndexError:
        return False


def split_disjoint(D: Dataset, fraction: float, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Row-disjoint split, stratified per class so both halves keep the class balance."""
    if not 0.0 < fraction < 1.0:
        raise DatasetError("fraction must lie strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    first, second = [], []
    for c in np.unique(D.labels):
        rows = np.flatnonzero(D.labels == c)
        rng.shuffle(rows)
        cut = int(round(fraction * rows.size))
        first.append(rows[:cut])
        second.append(rows[cut:])
    a = np.sort(np.concatenate(first))
    b = np.sort(np.concatenate(second))
    return D.subset(rng.permutation(a)), D.subset(rng.permutation(b))


# -- on-disk formats ---------------------------------------------------------


def save_pold(D: Dataset, path) -> int:
    n, d = D.features.shape
    payload = _HEADER.pack(POLD_MAGIC, POLD_VERSION, n, d) + _encode(D.features, D.labels)
    Path(path).write_bytes(payload)
    return len(payload)


def load_pold(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DatasetError(f"{path}: too short for a POLD header")
    magic, version, n, d = _HEADER.unpack_from(raw)
    if magic != POLD_MAGIC:
        raise DatasetError(f"{path}: bad magic {magic!r}")
    if version != POLD_VERSION:
        raise DatasetError(f"{path}: unsupported POLD version {version}")
    need = _HEADER.size + 8 * n * d + 8 * n
    if len(raw) != need:
        raise DatasetError(f"{path}: expected {need} bytes, found {len(raw)}")
    off = _HEADER.size
    X = np.frombuffer(raw, dtype="<f8", count=n * d, offset=off).reshape(n, d)
    y = np.frombuffer(raw, dtype="<i8", count=n, offset=off + 8 * n * d)
    return Dataset(X, y)


def load_csv(path) -> Dataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: empty CSV") from None
        if "label" not in header:
            raise DatasetError(f"{path}: no 'label' column in header")
        li = header.index("label")
        rows = [r for r in reader if r]
    if not rows:
        raise DatasetError(f"{path}: no data rows")
    try:
        y = np.array([int(float(r[li])) for r in rows], dtype=np.int64)
        X = np.array([[float(v) for j, v in enumerate(r) if j != li] for r in rows])
    except ValueError as exc:
        raise DatasetError(f"{path}: {exc}") from None
    return Dataset(X, y)


def load_dataset(path) -> Dataset:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return load_csv(path)
    return load_pold(path)
