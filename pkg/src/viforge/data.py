"""Datasets, feature dropping, splitting, synthetic generators and CSV I/O."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import InvalidArgumentError, ParseError
from .numerics import RngStream, mvn_sample

HIGHDIM_BETA_HEAD = (5.0, 4.0, 3.0, 2.0, 1.0)


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    x: np.ndarray
    y: np.ndarray
    feature_names: tuple | None = None

    def __post_init__(self):
        x = _frozen(self.x)
        y = _frozen(self.y).ravel()
        if x.ndim != 2:
            raise InvalidArgumentError(f"x must be 2-D, got shape {x.shape}")
        if x.shape[0] < 1:
            raise InvalidArgumentError("dataset needs at least one row")
        if y.shape[0] != x.shape[0]:
            raise InvalidArgumentError(f"y has {y.shape[0]} entries but x has {x.shape[0]} rows")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise InvalidArgumentError("dataset contains non-finite values")
        names = self.feature_names
        if names is not None:
            names = tuple(str(n) for n in names)
            if len(names) != x.shape[1]:
                raise InvalidArgumentError("feature_names length does not match column count")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "feature_names", names)

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def p(self):
        return self.x.shape[1]

    def rows(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.x[idx], self.y[idx], self.feature_names)

    def with_y(self, y) -> "Dataset":
        return Dataset(self.x, y, self.feature_names)


@dataclass(frozen=True)
class DropSpec:
    """Feature indices to drop and the constant each is replaced with."""

    indices: tuple
    replacement: tuple = field(default=())

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if len(set(idx)) != len(idx):
            raise InvalidArgumentError("drop indices must be distinct")
        order = np.argsort(idx, kind="stable")
        rep = tuple(float(r) for r in self.replacement)
        if len(rep) != len(idx):
            raise InvalidArgumentError("need one replacement value per dropped index")
        object.__setattr__(self, "indices", tuple(idx[i] for i in order))
        object.__setattr__(self, "replacement", tuple(rep[i] for i in order))

    @classmethod
    def from_means(cls, reference: Dataset, indices) -> "DropSpec":
        """Replacement values are column means of ``reference`` (the training portion)."""
        idx = sorted(int(i) for i in indices)
        for i in idx:
            if not 0 <= i < reference.p:
                raise InvalidArgumentError(f"feature index {i} out of range for p={reference.p}")
        means = reference.x.mean(axis=0)
        return cls(tuple(idx), tuple(float(means[i]) for i in idx))


def drop_features(d: Dataset, spec: DropSpec) -> Dataset:
    if not spec.indices:
        return d
    for i in spec.indices:
        if not 0 <= i < d.p:
            raise InvalidArgumentError(f"feature index {i} out of range for p={d.p}")
    x = np.array(d.x)
    x[:, list(spec.indices)] = np.asarray(spec.replacement)
    return Dataset(x, d.y, d.feature_names)


@dataclass(frozen=True)
class SplitPlan:
    q: float
    rng: RngStream

    def __post_init__(self):
        if not 0.0 < self.q < 1.0:
            raise InvalidArgumentError(f"split fraction must be in (0, 1), got {self.q}")


def split_sizes(n, q):
    first = int(math.floor(q * n + 0.5))
    return min(max(first, 1), n - 1)


def split_indices(n, plan: SplitPlan):
    if n < 2:
        raise InvalidArgumentError("need at least two rows to split")
    perm = plan.rng.generator().permutation(n)
    k = split_sizes(n, plan.q)
    return np.sort(perm[:k]), np.sort(perm[k:])


def split(d: Dataset, plan: SplitPlan):
    """Random row partition; the first part has round(q * N) rows, both parts non-empty."""
    first, second = split_indices(d.n, plan)
    return d.rows(first), d.rows(second)


def _corr_cov(p, rho, sigma):
    cov = np.eye(p) * sigma**2
    if p >= 2:
        cov[0, 1] = cov[1, 0] = rho * sigma**2
    return cov


def gen_correlated_linear(rho, beta, sigma_x=1.0, sigma_eps=1.0, n=1000, rng: RngStream = None):
    """Linear model with Corr(X1, X2) = rho; returns the data and the true VI of X1."""
    if not -1.0 <= rho <= 1.0:
        raise InvalidArgumentError(f"rho must be in [-1, 1], got {rho}")
    beta = np.asarray(beta, dtype=float)
    p = beta.shape[0]
    rng = rng or RngStream(0)
    x = mvn_sample(np.zeros(p), _corr_cov(p, rho, sigma_x), n, rng.child("data"))
    eps = sigma_eps * rng.child("noise").generator().standard_normal(n)
    true_vi = beta[0] ** 2 * (1.0 - rho**2) * sigma_x**2
    return Dataset(x, x @ beta + eps), float(true_vi)


def highdim_beta(p):
    if p < len(HIGHDIM_BETA_HEAD) + 1:
        raise InvalidArgumentError("high-dimensional generator needs p >= 6")
    beta = np.zeros(p)
    beta[: len(HIGHDIM_BETA_HEAD)] = HIGHDIM_BETA_HEAD
    return beta


def gen_highdim(kind, p, n, rng: RngStream, noise_sd=1.0, teacher_width=64, teacher_sd=1.0):
    """Features N(0, Sigma) with Corr(X1, X2) = 0.5, responses from a linear or ReLU teacher.

    The ReLU teacher is ``V relu(W x) / sqrt(teacher_width)``; the width
    normalisation keeps the response on the same scale as the linear kind.
    """
    beta = highdim_beta(p)
    x = mvn_sample(np.zeros(p), _corr_cov(p, 0.5, 1.0), n, rng.child("data"))
    eps = noise_sd * rng.child("noise").generator().standard_normal(n)
    if kind == "linear":
        y = x @ beta
    elif kind == "nn-teacher":
        g = rng.child("teacher").generator()
        w = beta[None, :] + teacher_sd * g.standard_normal((teacher_width, p))
        v = g.standard_normal(teacher_width)
        y = np.maximum(x @ w.T, 0.0) @ v / np.sqrt(teacher_width)
    else:
        raise InvalidArgumentError(f"unknown generator kind {kind!r}")
    return Dataset(x, y + eps)


def logistic_beta(p):
    return 10.0 * np.arange(p, dtype=float)


def gen_logistic(p=10, n=5000, rng: RngStream = None):
    """Binary 0/1 responses with log-odds X @ (10 * (0, 1, ..., p-1))."""
    rng = rng or RngStream(0)
    beta = logistic_beta(p)
    x = mvn_sample(np.zeros(p), _corr_cov(p, 0.5, 1.0), n, rng.child("data"))
    u = rng.child("noise").generator().random(n)
    y = (u < expit(x @ beta)).astype(float)
    return Dataset(x, y)


def gen_discrete_uniform(p, n, rng: RngStream):
    """Feature j (1-based) uniform on the integers j-1, ..., j+2."""
    g = rng.generator()
    cols = [g.integers(j - 1, j + 3, size=n) for j in range(1, p + 1)]
    return np.column_stack(cols).astype(float)


def load_csv(path, target_column) -> Dataset:
    """Read a numeric CSV with a header row. Rows and columns in errors are 1-based."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(f"{path}: empty file", row=1) from None
        if target_column not in header:
            raise ParseError(f"{path}: target column {target_column!r} not in header", row=1)
        width = len(header)
        values = []
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != width:
                raise ParseError(
                    f"{path}: row {row_no} has {len(row)} cells, expected {width}",
                    row=row_no,
                )
            parsed = []
            for col_no, cell in enumerate(row, start=1):
                try:
                    v = float(cell)
                except ValueError:
                    v = math.nan
                if not math.isfinite(v):
                    raise ParseError(
                        f"{path}: non-numeric cell {cell!r} at row {row_no}, "
                        f"column {col_no} ({header[col_no - 1]})",
                        row=row_no,
                        column=col_no,
                    )
                parsed.append(v)
            values.append(parsed)
    if not values:
        raise ParseError(f"{path}: no data rows", row=2)
    arr = np.array(values)
    t = header.index(target_column)
    keep = [i for i in range(width) if i != t]
    return Dataset(arr[:, keep], arr[:, t], tuple(header[i] for i in keep))


def write_csv(d: Dataset, path, target_column="target"):
    names = d.feature_names or tuple(f"x{j + 1}" for j in range(d.p))
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(list(names) + [target_column])
        for row, yi in zip(d.x, d.y):
            w.writerow([repr(float(v)) for v in row] + [repr(float(yi))])


def standardize(d: Dataset, target=True) -> Dataset:
    """Centre and scale each column (and the response unless ``target`` is False).

    Constant columns are only centred.
    """
    sd = d.x.std(axis=0)
    x = (d.x - d.x.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
    y = d.y
    if target:
        y_sd = y.std()
        y = (y - y.mean()) / (y_sd if y_sd > 0 else 1.0)
    return Dataset(x, y, d.feature_names)
