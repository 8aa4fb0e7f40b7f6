"""Dataset ingestion (LIBSVM text), preprocessing and synthetic problems."""

from __future__ import annotations

import gzip
import io
import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Optional, Union

import numpy as np
import scipy.sparse as sp

from .linalg import as_csr

__all__ = [
    "DATA_DIR_ENV",
    "Dataset",
    "LibsvmParseError",
    "SyntheticProblem",
    "load_libsvm",
    "make_synthetic",
    "normalize_rows",
    "parse_libsvm",
    "resolve_data_path",
    "train_test_split",
    "write_libsvm",
]

#: Environment variable naming the directory relative dataset paths resolve against.
DATA_DIR_ENV = "SAPPHIRE_DATA_DIR"

_BUFSIZE = 64 * 1024 * 1024
_GZIP_MAGIC = b"\x1f\x8b"
_TOKEN = re.compile(rb"\S+")


class LibsvmParseError(ValueError):
    def __init__(self, message: str, line: int, offset: int):
        super().__init__(f"line {line} (byte offset {offset}): {message}")
        self.line = line
        self.offset = offset


@dataclass(frozen=True, eq=False)
class Dataset:
    """Feature matrix (CSR, ``n x p``) with one label per row.

    ``kind`` is ``"binary"`` (labels in {-1, +1}) or ``"real"``.
    """

    features: sp.csr_matrix
    labels: np.ndarray
    kind: str = "real"
    name: str = ""

    def __post_init__(self):
        X = as_csr(self.features)
        y = np.asarray(self.labels, dtype=np.float64).ravel()
        if X.shape[0] != y.shape[0]:
            raise ValueError(f"{X.shape[0]} rows but {y.shape[0]} labels")
        if self.kind not in ("binary", "real"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if not np.all(np.isfinite(X.data)) or not np.all(np.isfinite(y)):
            raise ValueError("features and labels must be finite")
        if self.kind == "binary" and not np.all(np.abs(y) == 1.0):
            raise ValueError("binary labels must be -1 or +1")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        a, b = self.features, other.features
        return (
            self.kind == other.kind
            and a.shape == b.shape
            and np.array_equal(a.indptr, b.indptr)
            and np.array_equal(a.indices, b.indices)
            and np.array_equal(a.data, b.data)
            and np.array_equal(self.labels, other.labels)
        )

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=np.intp)
        return Dataset(self.features[rows], self.labels[rows], self.kind, self.name)


@dataclass(frozen=True, eq=False)
class SyntheticProblem:
    dataset: Dataset
    w_true: np.ndarray
    condition_number: float
    support_size: int
    seed: int
    singular_values: np.ndarray = field(repr=False, default=None)


def _binarize(y: np.ndarray) -> np.ndarray:
    # {0, 1} and other two-valued encodings map the smaller value to -1
    vals = np.unique(y)
    if np.all(np.isin(vals, (-1.0, 1.0))):
        return y
    if vals.size > 2:
        raise ValueError(f"binary dataset has {vals.size} distinct labels")
    return np.where(y == vals.max(), 1.0, -1.0) if vals.size == 2 else np.ones_like(y)


def parse_libsvm(
    stream: Union[BinaryIO, bytes, Iterable[bytes]],
    n_features: Optional[int] = None,
    kind: str = "auto",
    name: str = "",
) -> Dataset:
    """Parse LIBSVM text (``label idx:val ...``, 1-based ascending indices).

    ``kind="auto"`` yields a binary dataset when every label lies in
    {-1, +1}; ``kind="binary"`` remaps two-valued labels (e.g. {0, 1}) to
    ±1. A trailing ``#`` comment on any line is ignored.
    """
    if isinstance(stream, (bytes, bytearray)):
        stream = io.BytesIO(stream)
    labels: list[float] = []
    indptr = [0]
    indices: list[int] = []
    values: list[float] = []
    max_idx = 0
    offset = 0
    for lineno, raw in enumerate(stream, start=1):
        line_offset = offset
        offset += len(raw)
        body = raw.split(b"#", 1)[0]
        tokens = list(_TOKEN.finditer(body))
        if not tokens:
            continue
        head = tokens[0].group()
        try:
            label = float(head)
        except ValueError:
            raise LibsvmParseError(f"bad label {head!r}", lineno, line_offset) from None
        if not math.isfinite(label):
            raise LibsvmParseError("non-finite label", lineno, line_offset)
        prev = 0
        for m in tokens[1:]:
            tok, pos = m.group(), line_offset + m.start()
            idx_s, sep, val_s = tok.partition(b":")
            try:
                if not sep:
                    raise ValueError
                idx = int(idx_s)
                val = float(val_s)
            except ValueError:
                raise LibsvmParseError(f"malformed token {tok!r}", lineno, pos) from None
            if idx < 1:
                raise LibsvmParseError(f"index {idx} is not 1-based", lineno, pos)
            if idx <= prev:
                raise LibsvmParseError(f"index {idx} not ascending", lineno, pos)
            if not math.isfinite(val):
                raise LibsvmParseError(f"non-finite value {tok!r}", lineno, pos)
            prev = idx
            if val != 0.0:
                indices.append(idx - 1)
                values.append(val)
        max_idx = max(max_idx, prev)
        labels.append(label)
        indptr.append(len(indices))
    p = max_idx if n_features is None else int(n_features)
    if p < max_idx:
        raise ValueError(f"n_features={p} but index {max_idx} observed")
    y = np.asarray(labels, dtype=np.float64)
    X = sp.csr_matrix(
        (np.asarray(values, dtype=np.float64), np.asarray(indices, dtype=np.int32), np.asarray(indptr)),
        shape=(len(labels), p),
    )
    if kind == "auto":
        kind = "binary" if y.size and np.all(np.abs(y) == 1.0) else "real"
    if kind == "binary":
        y = _binarize(y)
    return Dataset(X, y, kind, name)


def resolve_data_path(path: Union[str, os.PathLike]) -> Path:
    p = Path(path)
    if not p.is_absolute() and not p.exists() and os.environ.get(DATA_DIR_ENV):
        p = Path(os.environ[DATA_DIR_ENV]) / p
    return p


def load_libsvm(path, n_features: Optional[int] = None, kind: str = "auto") -> Dataset:
    """Read a LIBSVM file from disk; gzip input is detected from magic bytes."""
    p = resolve_data_path(path)
    with open(p, "rb") as fh:
        magic = fh.read(2)
    with open(p, "rb", buffering=_BUFSIZE) as raw:
        stream = io.BufferedReader(gzip.GzipFile(fileobj=raw), _BUFSIZE) if magic == _GZIP_MAGIC else raw
        return parse_libsvm(stream, n_features=n_features, kind=kind, name=p.name)


def write_libsvm(d: Dataset, stream: BinaryIO) -> None:
    X = d.features
    for i in range(X.shape[0]):
        lo, hi = X.indptr[i], X.indptr[i + 1]
        label = f"{int(d.labels[i]):+d}" if d.kind == "binary" else repr(float(d.labels[i]))
        feats = " ".join(f"{j + 1}:{v!r}" for j, v in zip(X.indices[lo:hi], X.data[lo:hi].tolist()))
        stream.write((label + (" " + feats if feats else "") + "\n").encode())


def normalize_rows(d: Dataset) -> Dataset:
    """Scale every nonzero row to unit Euclidean norm; zero rows stay zero."""
    X = d.features.copy()
    norms = np.sqrt(np.asarray(X.multiply(X).sum(axis=1)).ravel())
    scale = np.ones_like(norms)
    nz = norms > 0
    scale[nz] = 1.0 / norms[nz]
    # already-unit rows are left bit-identical so normalization is idempotent
    scale[np.abs(norms - 1.0) <= 1e-12] = 1.0
    X.data *= np.repeat(scale, np.diff(X.indptr))
    return Dataset(X, d.labels.copy(), d.kind, d.name)


def train_test_split(d: Dataset, test_fraction: float, seed: int = 0) -> tuple[Dataset, Dataset]:
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    perm = np.random.default_rng(seed).permutation(d.n_samples)
    n_test = int(round(test_fraction * d.n_samples))
    test, train = np.sort(perm[:n_test]), np.sort(perm[n_test:])
    return d.subset(train), d.subset(test)


def _random_orthonormal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    Q, R = np.linalg.qr(rng.standard_normal((rows, cols)))
    return Q * np.sign(np.diag(R))


def make_synthetic(
    n: int,
    p: int,
    condition_number: float = 1.0,
    support_size: int = 0,
    noise_std: float = 0.0,
    task: str = "lasso",
    seed: int = 0,
) -> SyntheticProblem:
    """Dense ``n x p`` design with geometrically spaced singular values.

    The largest singular value is ``sqrt(n)`` so that ``A.T A / n`` has unit
    top eigenvalue, and the smallest is ``sqrt(n) / condition_number``. The
    support of ``w_true`` is a random index set with ±1-ish coefficients.
    """
    if n < 1 or p < 1:
        raise ValueError("n and p must be positive")
    if not 0 <= support_size <= p:
        raise ValueError(f"support_size must lie in [0, {p}]")
    if condition_number < 1.0:
        raise ValueError("condition_number must be >= 1")
    if task not in ("lasso", "logistic"):
        raise ValueError(f"unknown task {task!r}")
    rng = np.random.default_rng(seed)
    k = min(n, p)
    s = np.sqrt(n) * np.geomspace(1.0, 1.0 / condition_number, k)
    U = _random_orthonormal(rng, n, k)
    V = _random_orthonormal(rng, p, k)
    A = (U * s) @ V.T
    w = np.zeros(p)
    if support_size:
        supp = rng.choice(p, size=support_size, replace=False)
        w[supp] = rng.choice([-1.0, 1.0], size=support_size) * rng.uniform(0.5, 1.5, size=support_size)
    z = A @ w + noise_std * rng.standard_normal(n)
    if task == "lasso":
        y, kind = z, "real"
    else:
        y, kind = np.where(z >= 0.0, 1.0, -1.0), "binary"
    ds = Dataset(as_csr(A), y, kind, f"synthetic-{task}")
    return SyntheticProblem(ds, w, float(condition_number), int(support_size), int(seed), s)
