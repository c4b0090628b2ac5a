"""Datasets: synthetic generators, CSV ingestion, normalization and stream construction."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InputError, SchemaError

log = logging.getLogger(__name__)

STOCK_URL = "https://raw.githubusercontent.com/trungngv/cogp/master/data/fx/fx2007-processed.csv"


@dataclass(frozen=True)
class NormStats:
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float
    y_std: float


@dataclass(frozen=True, eq=False)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    norm_stats: NormStats | None = None
    dropped: int = 0
    source: str = ""

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        if X.shape[0] != y.shape[0]:
            raise InputError(f"{X.shape[0]} rows of X but {y.shape[0]} targets")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    def __len__(self):
        return self.y.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, X=self.X[idx], y=self.y[idx])


def gen_synthetic(kind: str, n: int, noise_sd: float = 0.1, seed: int = 0) -> Dataset:
    """``y = sin(4x)`` or ``cos(4x)`` plus Gaussian noise on ``n`` equally spaced ``x`` in ``[0, 2 pi]``."""
    if n < 1:
        raise InputError("n must be at least 1")
    if noise_sd < 0:
        raise InputError("noise_sd must be nonnegative")
    funcs = {"sin": np.sin, "cos": np.cos}
    if kind not in funcs:
        raise InputError(f"unknown synthetic kind {kind!r}")
    x = np.linspace(0.0, 2.0 * np.pi, n)
    rng = np.random.default_rng(seed)
    y = funcs[kind](4.0 * x) + noise_sd * rng.standard_normal(n)
    return Dataset(x[:, None], y, source=f"{kind}(n={n},noise_sd={noise_sd},seed={seed})")


def _resolve_column(col, header: list[str] | None, ncols: int) -> int:
    if isinstance(col, str) and not col.lstrip("-").isdigit():
        if header is None or col not in header:
            raise SchemaError(f"column {col!r} not found")
        return header.index(col)
    idx = int(col)
    if not -ncols <= idx < ncols:
        raise SchemaError(f"column index {idx} out of range for {ncols} columns")
    return idx % ncols


def load_csv(path, target: str | int = -1, features: Sequence[str | int] | None = None,
             header: bool = True, delimiter: str = ",") -> Dataset:
    """Read a delimited file of decimal numbers.

    ``features`` defaults to every column except ``target``. Rows with an
    unparseable or non-finite selected cell are dropped with a warning.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        rows = [r for r in csv.reader(fh, delimiter=delimiter) if r and any(c.strip() for c in r)]
    names = None
    if header:
        if not rows:
            raise InputError(f"{path} is empty")
        names = [c.strip() for c in rows[0]]
        rows = rows[1:]
    ncols = len(names) if names is not None else (len(rows[0]) if rows else 0)
    if ncols == 0:
        raise InputError(f"{path} has no columns")
    t = _resolve_column(target, names, ncols)
    if features is None:
        f_idx = [j for j in range(ncols) if j != t]
    else:
        f_idx = [_resolve_column(c, names, ncols) for c in features]
    if not f_idx:
        raise SchemaError("no feature columns selected")
    cols = f_idx + [t]
    X_rows, y_rows, dropped = [], [], 0
    for lineno, row in enumerate(rows, start=2 if header else 1):
        try:
            vals = [float(row[j]) for j in cols]
        except (ValueError, IndexError):
            vals = None
        if vals is None or not all(math.isfinite(v) for v in vals):
            dropped += 1
            warnings.warn(f"{path}:{lineno}: dropping row with an unparseable or non-finite cell", stacklevel=2)
            continue
        X_rows.append(vals[:-1])
        y_rows.append(vals[-1])
    log.info("loaded %d rows from %s (%d dropped)", len(y_rows), path, dropped)
    X = np.array(X_rows, dtype=np.float64).reshape(len(y_rows), len(f_idx))
    return Dataset(X, np.array(y_rows, dtype=np.float64), dropped=dropped, source=str(path))


def normalize(ds: Dataset) -> Dataset:
    """Center and scale every feature column and the target to mean 0, standard deviation 1.

    Constant columns are only centered.
    """
    if len(ds) < 2:
        raise InputError("normalization needs at least two rows")
    x_mean = ds.X.mean(0)
    x_std = ds.X.std(0)
    flat = x_std == 0
    if flat.any():
        warnings.warn(f"constant feature columns {np.flatnonzero(flat).tolist()} are centered but not scaled", stacklevel=2)
        x_std = np.where(flat, 1.0, x_std)
    y_mean = float(ds.y.mean())
    y_std = float(ds.y.std())
    if y_std == 0:
        warnings.warn("constant target is centered but not scaled", stacklevel=2)
        y_std = 1.0
    stats = NormStats(x_mean, x_std, y_mean, y_std)
    return replace(ds, X=(ds.X - x_mean) / x_std, y=(ds.y - y_mean) / y_std, norm_stats=stats)


def denormalize(ds: Dataset) -> Dataset:
    s = ds.norm_stats
    if s is None:
        return ds
    return replace(ds, X=ds.X * s.x_std + s.x_mean, y=ds.y * s.y_std + s.y_mean, norm_stats=None)


def denormalize_y(stats: NormStats, y):
    return np.asarray(y) * stats.y_std + stats.y_mean


def train_test_split(ds: Dataset, test_frac: float, seed: int = 0) -> tuple[Dataset, Dataset | None]:
    """Hold out a random ``test_frac`` of rows; both parts keep the original row order."""
    if test_frac <= 0:
        return ds, None
    if not test_frac < 1:
        raise InputError("test_frac must be below 1")
    n = len(ds)
    n_test = int(round(test_frac * n))
    if n_test == 0:
        return ds, None
    if n_test >= n:
        raise InputError("test split leaves no training rows")
    rng = np.random.default_rng(seed)
    test_idx = np.sort(rng.choice(n, size=n_test, replace=False))
    mask = np.ones(n, dtype=bool)
    mask[test_idx] = False
    return ds.subset(np.flatnonzero(mask)), ds.subset(test_idx)


@dataclass(frozen=True, eq=False)
class Stream:
    """A dataset cut into a pretraining slice followed by online batches.

    ``order`` is the row permutation applied to the source dataset;
    ``pretrain_idx`` and ``batch_idx`` index into the source rows.
    """

    pretrain: tuple[np.ndarray, np.ndarray]
    batches: list[tuple[np.ndarray, np.ndarray]]
    ordering: str
    batch_size: int
    seed: int
    order: np.ndarray
    pretrain_idx: np.ndarray = field(repr=False, default=None)
    batch_idx: list[np.ndarray] = field(repr=False, default=None)

    def __len__(self):
        return len(self.batches)

    def without_batch(self, k: int) -> "Stream":
        """The same stream with batch ``k`` removed."""
        return replace(
            self,
            batches=self.batches[:k] + self.batches[k + 1 :],
            batch_idx=self.batch_idx[:k] + self.batch_idx[k + 1 :],
        )


def make_stream(ds: Dataset, ordering: str = "sequential", batch_size: int = 1,
                pretrain_frac: float = 0.05, seed: int = 0) -> Stream:
    if not 0 < pretrain_frac < 1:
        raise InputError("pretrain_frac must lie in (0, 1)")
    if batch_size < 1:
        raise InputError("batch_size must be at least 1")
    n = len(ds)
    if ordering == "sequential":
        order = np.arange(n)
    elif ordering == "iid":
        order = np.random.default_rng(seed).permutation(n)
    else:
        raise InputError(f"unknown ordering {ordering!r}")
    n_pre = math.ceil(pretrain_frac * n - 1e-9)
    if n_pre < 1:
        raise InputError("pretraining slice is empty")
    pre_idx = order[:n_pre]
    rest = order[n_pre:]
    batch_idx = [rest[i : i + batch_size] for i in range(0, rest.size, batch_size)]
    return Stream(
        pretrain=(ds.X[pre_idx], ds.y[pre_idx]),
        batches=[(ds.X[b], ds.y[b]) for b in batch_idx],
        ordering=ordering,
        batch_size=batch_size,
        seed=seed,
        order=order,
        pretrain_idx=pre_idx,
        batch_idx=batch_idx,
    )


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
