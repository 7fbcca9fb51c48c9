"""Shared domain types: datasets, Gram matrices, hypotheses and tuning grids.

Indices are 0-based throughout the library. The CLI and the JSON reports
translate to the 1-based convention users see.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InputError

__all__ = [
    "Dataset",
    "HypothesisSpec",
    "TuningConfig",
    "DEFAULT_LAMBDA_PREC_GRID",
    "gram",
    "column_standardize",
    "center",
    "read_csv",
]

#: Candidate values for the weight-clamping threshold used in the simulations.
DEFAULT_LAMBDA_PREC_GRID: tuple[float, ...] = (0.01, 0.05, 0.1, 0.5, 1.0)


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Regression data ``Y = X beta + u`` with no implicit intercept.

    ``X`` is stored as a read-only Fortran-ordered float64 array so that
    column access in the coordinate-descent kernel is contiguous.
    """

    X: np.ndarray
    Y: np.ndarray
    column_names: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        X = np.asarray(self.X, dtype=np.float64)
        Y = np.asarray(self.Y, dtype=np.float64)
        if X.ndim != 2:
            raise InputError(f"X must be 2-dimensional, got shape {X.shape}")
        if Y.ndim != 1:
            Y = Y.reshape(-1)
        n, p = X.shape
        if n < 2 or p < 1:
            raise InputError(f"need n >= 2 and p >= 1, got n={n}, p={p}")
        if Y.shape[0] != n:
            raise InputError(f"Y has length {Y.shape[0]} but X has {n} rows")
        if not np.all(np.isfinite(X)):
            bad = np.argwhere(~np.isfinite(X))[0]
            raise InputError(f"non-finite entry in X at row {bad[0]}, column {bad[1]}")
        if not np.all(np.isfinite(Y)):
            raise InputError(f"non-finite entry in Y at row {int(np.argmin(np.isfinite(Y)))}")
        if self.column_names is not None and len(self.column_names) != p:
            raise InputError("column_names length does not match number of columns")
        object.__setattr__(self, "X", _frozen(np.array(X, order="F", copy=True)))
        object.__setattr__(self, "Y", _frozen(np.array(Y, copy=True)))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def without_column(self, j: int) -> "Dataset":
        """Nodewise problem: regress column ``j`` on all other columns."""
        if self.p < 2:
            raise InputError("nodewise regression needs p >= 2")
        if not 0 <= j < self.p:
            raise InputError(f"column index {j} out of range for p={self.p}")
        keep = np.r_[0:j, j + 1 : self.p]
        return Dataset(self.X[:, keep], self.X[:, j])


def gram(dataset: Dataset) -> np.ndarray:
    """Empirical Gram matrix ``X'X / n`` (symmetrised to kill round-off)."""
    X = dataset.X
    G = X.T @ X / dataset.n
    return _frozen((G + G.T) / 2.0)


def column_standardize(dataset: Dataset, enabled: bool = True) -> tuple[Dataset, np.ndarray]:
    """Rescale every column to unit empirical mean square ``||x||_n = 1``.

    Returns the rescaled dataset and the per-column scales ``s_j``; a
    coefficient on the rescaled data maps back to the original scale as
    ``beta_j / s_j``. With ``enabled=False`` the dataset is returned as-is
    with unit scales.
    """
    if not enabled:
        return dataset, np.ones(dataset.p)
    X = dataset.X
    sd = X.std(axis=0)
    zero = np.flatnonzero(sd == 0.0)
    if zero.size:
        j = int(zero[0])
        name = dataset.column_names[j] if dataset.column_names else f"#{j + 1}"
        raise InputError(f"column {name} has zero variance and cannot be standardized")
    scales = np.sqrt(np.mean(X * X, axis=0))
    return Dataset(X / scales, dataset.Y, dataset.column_names), scales


def center(dataset: Dataset) -> tuple[Dataset, np.ndarray, float]:
    """Subtract column means of X and the mean of Y.

    Inference afterwards concerns the centered model (slopes only).
    """
    x_mean = dataset.X.mean(axis=0)
    y_mean = float(dataset.Y.mean())
    return Dataset(dataset.X - x_mean, dataset.Y - y_mean, dataset.column_names), x_mean, y_mean


@dataclass(frozen=True)
class HypothesisSpec:
    """Coordinates ``H`` under test, optional unit contrast ``alpha`` and null values."""

    H: tuple[int, ...]
    null_values: tuple[float, ...]
    alpha: np.ndarray | None = None

    def validate(self, p: int) -> None:
        if len(self.H) == 0:
            raise InputError("H must be non-empty")
        if len(set(self.H)) != len(self.H):
            raise InputError(f"indices in H must be distinct, got {self.H}")
        for j in self.H:
            if not 0 <= j < p:
                raise InputError(f"index {j} out of range for p={p}")
        if len(self.null_values) != len(self.H):
            raise InputError(
                f"expected {len(self.H)} null values, got {len(self.null_values)}"
            )
        if self.alpha is not None:
            a = np.asarray(self.alpha, dtype=float)
            if a.shape != (p,):
                raise InputError("alpha must have length p")
            if abs(np.linalg.norm(a) - 1.0) > 1e-10:
                raise InputError("alpha must have unit Euclidean norm")
            outside = np.setdiff1d(np.flatnonzero(a), self.H)
            if outside.size:
                raise InputError(f"alpha has support outside H at {outside.tolist()}")


@dataclass(frozen=True)
class TuningConfig:
    """Grids and solver settings.

    ``lambda_grid`` and ``lambda_node_grid`` may be ``None``, in which case a
    data-driven grid of ``n_lambda`` log-spaced points from the problem's
    ``lambda_max`` down to ``lambda_min_ratio * lambda_max`` is used.

    ``max_df_ratio`` guards BIC against near-saturated fits when p > n: a
    descending path stops after the first fit with more than
    ``max_df_ratio * n`` nonzero coefficients, and such fits are only
    selected when no other converged fit exists. Set it to ``None`` to
    evaluate the whole grid.

    ``stage2_grid`` sets the default grid of the weighted refit: ``"weighted"``
    runs from the weighted ``lambda_max = max_j |X_j'Y/n| / w_j`` (the
    convention of penalty-factor Lasso paths), ``"shared"`` reuses the
    first-stage grid. An explicit ``lambda_grid`` is always used as given.
    """

    lambda_grid: tuple[float, ...] | None = None
    lambda_prec_grid: tuple[float, ...] = DEFAULT_LAMBDA_PREC_GRID
    lambda_node_grid: tuple[float, ...] | None = None
    tolerance: float = 1e-7
    kkt_tolerance: float = 1e-5
    max_iterations: int = 10_000
    n_lambda: int = 50
    lambda_min_ratio: float = 0.01
    polish: bool = True
    max_df_ratio: float | None = 0.5
    stage2_grid: str = "weighted"

    def __post_init__(self) -> None:
        for name in ("lambda_grid", "lambda_prec_grid", "lambda_node_grid"):
            grid = getattr(self, name)
            if grid is None:
                if name == "lambda_prec_grid":
                    raise InputError("lambda_prec_grid must be given")
                continue
            grid = tuple(float(v) for v in np.atleast_1d(grid))
            if not grid:
                raise InputError(f"{name} must be non-empty")
            if any(not math.isfinite(v) or v <= 0 for v in grid):
                raise InputError(f"{name} entries must be finite and strictly positive")
            object.__setattr__(self, name, grid)
        if not self.tolerance > 0 or not self.kkt_tolerance > 0:
            raise InputError("tolerances must be positive")
        if self.max_iterations < 1:
            raise InputError("max_iterations must be a positive integer")
        if self.n_lambda < 1 or not 0 < self.lambda_min_ratio <= 1:
            raise InputError("need n_lambda >= 1 and 0 < lambda_min_ratio <= 1")
        if self.stage2_grid not in ("weighted", "shared"):
            raise InputError("stage2_grid must be 'weighted' or 'shared'")
        if self.max_df_ratio is not None and not 0 < self.max_df_ratio <= 1:
            raise InputError("max_df_ratio must lie in (0, 1] or be None")

    def max_df(self, n: int) -> float:
        """Largest support size eligible for BIC selection."""
        return math.inf if self.max_df_ratio is None else self.max_df_ratio * n

    @classmethod
    def from_mapping(cls, data: dict) -> "TuningConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise InputError(f"unknown tuning keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return {f: (list(v) if isinstance(v, tuple) else v) for f, v in self.__dict__.items()}


def log_grid(lambda_max: float, n_lambda: int, ratio: float) -> tuple[float, ...]:
    """Descending log-spaced grid from ``lambda_max`` to ``ratio * lambda_max``."""
    if lambda_max <= 0:
        # Y orthogonal to every column: any positive lambda gives the zero fit.
        lambda_max = 1.0
    if n_lambda == 1:
        return (float(lambda_max),)
    return tuple(float(v) for v in np.geomspace(lambda_max, ratio * lambda_max, n_lambda))


def read_csv(path: str | Path) -> Dataset:
    """Read a dataset: header row, first column ``y``, one observation per row."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InputError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if len(header) < 2 or header[0] != "y":
            raise InputError(f"{path}: line 1: header must start with 'y' followed by covariates")
        rows = []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise InputError(
                    f"{path}: line {line}: expected {len(header)} fields, got {len(row)}"
                )
            values = []
            for col, cell in zip(header, row):
                try:
                    v = float(cell)
                except ValueError:
                    raise InputError(
                        f"{path}: line {line}, column {col!r}: non-numeric value {cell!r}"
                    ) from None
                if not math.isfinite(v):
                    raise InputError(f"{path}: line {line}, column {col!r}: non-finite value")
                values.append(v)
            rows.append(values)
    if len(rows) < 2:
        raise InputError(f"{path}: need at least 2 observations")
    data = np.asarray(rows)
    return Dataset(data[:, 1:], data[:, 0], tuple(header[1:]))


def write_csv(path: str | Path, dataset: Dataset, column_names: Sequence[str] | None = None) -> None:
    names = column_names or dataset.column_names or [f"x{j + 1}" for j in range(dataset.p)]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["y", *names])
        for yi, xi in zip(dataset.Y, dataset.X):
            w.writerow([repr(float(yi)), *(repr(float(v)) for v in xi)])
