"""Core data containers: design matrix handling, standardization, Z/U partition.

Conventions used throughout the package:

* predictor indices are 1-based (`x1` .. `xp`, matching the CSV column names);
* sample variances use the divide-by-n convention, so after standardization
  the diagonal of ``X.T @ X / n`` is exactly 1;
* the response is centered (mean removed) but never rescaled.

All containers are immutable after construction; operations are pure.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import (
    EmptySelection,
    FullSelection,
    InputOutputError,
    ValidationError,
    ZeroVarianceColumn,
)

MEAN_TOL = 1e-10
VAR_TOL = 1e-8


def zero_scale_columns(X: np.ndarray) -> np.ndarray:
    """Indices of columns whose spread is zero up to float rounding."""
    sd = X.std(axis=0)
    level = np.maximum(1.0, np.abs(X.mean(axis=0)))
    return np.flatnonzero(sd <= 1e-14 * level)


def _frozen_array(a, dtype=float):
    out = np.array(a, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class IndexSet:
    """Strictly increasing 1-based predictor indices."""

    indices: tuple[int, ...]

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if any(i < 1 for i in idx):
            raise ValidationError(f"indices must be >= 1, got {idx}")
        if len(set(idx)) != len(idx):
            raise ValidationError("indices must be unique")
        if any(a >= b for a, b in zip(idx, idx[1:])):
            raise ValidationError("indices must be strictly increasing")
        object.__setattr__(self, "indices", idx)

    @classmethod
    def from_iterable(cls, it):
        return cls(tuple(sorted(set(int(i) for i in it))))

    def __len__(self):
        return len(self.indices)

    def __iter__(self):
        return iter(self.indices)

    def __contains__(self, j):
        return j in self.indices

    def zero_based(self):
        """0-based numpy index array for column gathering."""
        return np.asarray(self.indices, dtype=int) - 1

    def complement(self, p):
        keep = set(self.indices)
        return IndexSet(tuple(j for j in range(1, p + 1) if j not in keep))


@dataclass(frozen=True)
class CoefficientVector:
    """Full-model coefficient vector of length p."""

    beta: np.ndarray

    def __post_init__(self):
        b = _frozen_array(np.asarray(self.beta, dtype=float).ravel())
        if not np.all(np.isfinite(b)):
            raise ValidationError("coefficients must be finite")
        object.__setattr__(self, "beta", b)

    def __len__(self):
        return self.beta.shape[0]

    def subvector(self, index_set: IndexSet) -> np.ndarray:
        return self.beta[index_set.zero_based()]


@dataclass(frozen=True)
class Dataset:
    """Design matrix plus response with the standardization affine map.

    ``column_means`` / ``column_scales`` / ``y_mean`` record the map so new
    observations can be transformed identically; for a raw dataset they are
    the identity map (zeros / ones / zero).
    """

    X: np.ndarray
    y: np.ndarray
    column_means: np.ndarray
    column_scales: np.ndarray
    y_mean: float = 0.0
    standardized: bool = False

    def __post_init__(self):
        X = _frozen_array(np.atleast_2d(np.asarray(self.X, dtype=float)))
        y = _frozen_array(np.asarray(self.y, dtype=float).ravel())
        if X.ndim != 2:
            raise ValidationError("X must be a 2-d matrix")
        n, p = X.shape
        if n < 2 or p < 1:
            raise ValidationError(f"need n >= 2 and p >= 1, got n={n}, p={p}")
        if y.shape[0] != n:
            raise ValidationError(f"y has length {y.shape[0]}, expected {n}")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValidationError("all entries of X and y must be finite")
        means = _frozen_array(np.asarray(self.column_means, dtype=float).ravel())
        scales = _frozen_array(np.asarray(self.column_scales, dtype=float).ravel())
        if means.shape[0] != p or scales.shape[0] != p:
            raise ValidationError("column_means/column_scales must have length p")
        if self.standardized:
            col_mean = X.mean(axis=0)
            col_var = X.var(axis=0)  # divide-by-n
            if np.max(np.abs(col_mean)) >= MEAN_TOL:
                raise ValidationError("standardized dataset has a column mean off zero")
            if np.max(np.abs(col_var - 1.0)) >= VAR_TOL:
                raise ValidationError("standardized dataset has a column variance off one")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "column_means", means)
        object.__setattr__(self, "column_scales", scales)
        object.__setattr__(self, "y_mean", float(self.y_mean))

    @classmethod
    def from_arrays(cls, X, y) -> "Dataset":
        """Wrap raw arrays; the recorded affine map is the identity."""
        X = np.asarray(X, dtype=float)
        p = X.shape[1] if X.ndim == 2 else 1
        return cls(X=X, y=y, column_means=np.zeros(p), column_scales=np.ones(p))

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def p(self):
        return self.X.shape[1]

    def transform_new(self, X_new: np.ndarray) -> np.ndarray:
        """Apply the recorded column affine map to new raw observations."""
        X_new = np.atleast_2d(np.asarray(X_new, dtype=float))
        if X_new.shape[1] != self.p:
            raise ValidationError(
                f"new observations have {X_new.shape[1]} columns, expected {self.p}"
            )
        return (X_new - self.column_means) / self.column_scales


@dataclass(frozen=True)
class Partition:
    """Kept predictors Z and removed predictors U, with their index sets."""

    Z: np.ndarray
    U: np.ndarray
    z_indices: IndexSet
    u_indices: IndexSet

    def __post_init__(self):
        Z = _frozen_array(self.Z)
        U = _frozen_array(self.U)
        if set(self.z_indices) & set(self.u_indices):
            raise ValidationError("z_indices and u_indices must be disjoint")
        if Z.shape[1] != len(self.z_indices) or U.shape[1] != len(self.u_indices):
            raise ValidationError("partition blocks do not match their index sets")
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "U", U)

    @property
    def q(self):
        return self.Z.shape[1]

    def reassemble(self) -> np.ndarray:
        """Scatter (Z, U) back into original column order; exact round trip."""
        n = self.Z.shape[0]
        p = self.q + self.U.shape[1]
        X = np.empty((n, p))
        X[:, self.z_indices.zero_based()] = self.Z
        X[:, self.u_indices.zero_based()] = self.U
        return X


def standardize(dataset: Dataset) -> Dataset:
    """Return a dataset whose columns have mean 0 and divide-by-n variance 1.

    The response is centered but not scaled. A dataset already carrying the
    ``standardized`` flag is returned unchanged so the recorded affine map
    always refers to the raw data scale.

    Raises ``ZeroVarianceColumn`` for constant columns: silently dropping them
    would corrupt the index bookkeeping used by the selection step.
    """
    if dataset.standardized:
        return dataset
    zero = zero_scale_columns(dataset.X)
    if zero.size:
        raise ZeroVarianceColumn(int(zero[0]) + 1)
    means = dataset.X.mean(axis=0)
    scales = np.sqrt(dataset.X.var(axis=0))  # divide-by-n
    y_mean = float(dataset.y.mean())
    return Dataset(
        X=(dataset.X - means) / scales,
        y=dataset.y - y_mean,
        column_means=means,
        column_scales=scales,
        y_mean=y_mean,
        standardized=True,
    )


def partition(dataset: Dataset, selected: IndexSet) -> Partition:
    """Split columns into kept block Z (selected) and removed block U."""
    p = dataset.p
    if len(selected) == 0:
        raise EmptySelection("selection is empty; the pipeline needs q >= 1")
    if any(j > p for j in selected):
        raise ValidationError(f"selected index exceeds p={p}")
    if len(selected) == p:
        raise FullSelection("selection keeps every column; no removed block U remains")
    complement = selected.complement(p)
    return Partition(
        Z=dataset.X[:, selected.zero_based()],
        U=dataset.X[:, complement.zero_based()],
        z_indices=selected,
        u_indices=complement,
    )


def load_csv(path) -> Dataset:
    """Read a dataset CSV: header ``y,x1,...,xp``, '.' decimal separator."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise ValidationError(f"{path}: empty file") from None
            rows = [row for row in reader if row]
    except OSError as exc:
        raise InputOutputError(f"cannot read {path}: {exc}") from exc
    header = [h.strip() for h in header]
    if not header or header[0] != "y":
        raise ValidationError(f"{path}: first column must be named 'y'")
    p = len(header) - 1
    expected = [f"x{j}" for j in range(1, p + 1)]
    if header[1:] != expected:
        raise ValidationError(f"{path}: predictor columns must be named x1..x{p}")
    if p < 1:
        raise ValidationError(f"{path}: no predictor columns")
    try:
        values = np.array([[float(v) for v in row] for row in rows], dtype=float)
    except ValueError as exc:
        raise ValidationError(f"{path}: non-numeric cell ({exc})") from exc
    if values.ndim != 2 or values.shape[0] < 2 or values.shape[1] != p + 1:
        raise ValidationError(f"{path}: need at least 2 complete rows of {p + 1} columns")
    return Dataset.from_arrays(values[:, 1:], values[:, 0])


def load_predictor_csv(path):
    """Read observations to predict on.

    Accepts either ``x1..xp`` columns alone or a leading ``y`` column
    (returned separately for prediction-error evaluation).
    """
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise ValidationError(f"{path}: empty file") from None
            rows = [row for row in reader if row]
    except OSError as exc:
        raise InputOutputError(f"cannot read {path}: {exc}") from exc
    header = [h.strip() for h in header]
    has_y = bool(header) and header[0] == "y"
    xcols = header[1:] if has_y else header
    p = len(xcols)
    if xcols != [f"x{j}" for j in range(1, p + 1)]:
        raise ValidationError(f"{path}: predictor columns must be named x1..x{p}")
    try:
        values = np.array([[float(v) for v in row] for row in rows], dtype=float)
    except ValueError as exc:
        raise ValidationError(f"{path}: non-numeric cell ({exc})") from exc
    if values.size == 0 or values.shape[1] != p + (1 if has_y else 0):
        raise ValidationError(f"{path}: ragged or empty data")
    if has_y:
        return values[:, 1:], values[:, 0]
    return values, None
