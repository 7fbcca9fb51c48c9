"""Desparsified estimates, robust covariance, intervals and Wald tests.

Given a penalised fit ``beta_hat`` and rows ``Theta_j`` (j in H),

    b_j = beta_hat_j + Theta_j' X'(Y - X beta_hat) / n

and the heteroskedasticity-robust covariance of ``sqrt(n)(b_H - beta_H)`` is
``M = (Theta Sigma_xu Theta')_H`` with ``Sigma_xu = n^-1 sum X_i X_i' u_i^2``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg, special, stats

from .core import Dataset, TuningConfig
from .errors import InputError, SingularityError
from .nodewise import ThetaRows, build_theta_rows
from .solver import LassoFit, kkt_check

__all__ = [
    "SandwichMatrix",
    "InferenceReport",
    "Chi2Result",
    "desparsify",
    "desparsify_kkt_form",
    "sandwich_covariance",
    "normal_quantile",
    "confidence_intervals",
    "chi2_test",
    "studentized_statistic",
    "delta_remainder",
    "infer",
]


def _beta(fit) -> np.ndarray:
    return np.asarray(fit.beta if hasattr(fit, "beta") else fit, dtype=float)


def _residuals(dataset: Dataset, beta: np.ndarray) -> np.ndarray:
    if beta.shape != (dataset.p,):
        raise InputError(f"coefficient vector has shape {beta.shape}, expected ({dataset.p},)")
    return dataset.Y - dataset.X @ beta


def desparsify(dataset: Dataset, fit, theta: ThetaRows) -> np.ndarray:
    """Bias-corrected estimates on ``theta.H`` (residual form)."""
    beta = _beta(fit)
    if theta.rows.shape[1] != dataset.p:
        raise InputError("Theta rows do not match the number of covariates")
    u = _residuals(dataset, beta)
    score = dataset.X.T @ u / dataset.n
    return beta[list(theta.H)] + theta.rows @ score


def desparsify_kkt_form(dataset: Dataset, fit: LassoFit, theta: ThetaRows) -> np.ndarray:
    """Same estimate written as ``beta + Theta lam W kappa``.

    ``kappa`` is taken as ``sign(beta_j)`` on the support and as the
    (clipped) certificate value elsewhere, so the two forms differ only by
    the solver's KKT residual.
    """
    if not hasattr(fit, "lam"):
        fit = fit.stage2
    kappa = np.clip(kkt_check(dataset, fit).kappa, -1.0, 1.0)
    return fit.beta[list(theta.H)] + theta.rows @ (fit.penalties * kappa)


@dataclass(frozen=True, eq=False)
class SandwichMatrix:
    """``(Theta Sigma_xu Theta')`` restricted to ``H``."""

    H: tuple[int, ...]
    values: np.ndarray

    @property
    def sigma_hat(self) -> np.ndarray:
        d = np.diag(self.values)
        return np.sqrt(np.maximum(d, 0.0))


def sandwich_covariance(dataset: Dataset, fit, theta: ThetaRows) -> SandwichMatrix:
    """Robust covariance without forming the p x p meat.

    Entry ``(j, k)`` is ``n^-1 sum_i (Theta_j'X_i)(Theta_k'X_i) u_i^2``.
    """
    u = _residuals(dataset, _beta(fit))
    V = dataset.X @ theta.rows.T * u[:, None]
    M = V.T @ V / dataset.n
    return SandwichMatrix(theta.H, (M + M.T) / 2.0)


def normal_quantile(q: float) -> float:
    """Standard normal quantile (``scipy.special.ndtri``, ~1e-15 relative)."""
    return float(special.ndtri(q))


def confidence_intervals(
    b_hat: np.ndarray, sandwich: SandwichMatrix, n: int, delta: float = 0.05
) -> np.ndarray:
    """Intervals ``b_j -/+ z_{1-delta/2} sigma_j / sqrt(n)`` as an (h, 2) array."""
    if not 0 < delta < 1:
        raise InputError("delta must lie in (0, 1)")
    var = np.diag(sandwich.values)
    bad = np.flatnonzero(~(var > 0))
    if bad.size:
        raise SingularityError(
            f"nonpositive variance for coordinate {sandwich.H[bad[0]]}; interval undefined"
        )
    half = normal_quantile(1 - delta / 2) * np.sqrt(var) / math.sqrt(n)
    b_hat = np.asarray(b_hat, dtype=float)
    return np.column_stack([b_hat - half, b_hat + half])


@dataclass(frozen=True)
class Chi2Result:
    statistic: float
    dof: int
    pvalue: float


def chi2_test(
    b_hat: np.ndarray, null_values: Sequence[float], sandwich: SandwichMatrix, n: int
) -> Chi2Result:
    """Wald statistic ``n d' M^{-1} d`` with ``d = b_H - null`` against chi2(h)."""
    M = sandwich.values
    null = np.asarray(null_values, dtype=float).reshape(-1)
    if null.shape != (M.shape[0],):
        raise InputError(f"expected {M.shape[0]} null values, got {null.shape[0]}")
    d = np.asarray(b_hat, dtype=float) - null
    try:
        c = linalg.cho_factor(M, lower=True)
    except linalg.LinAlgError:
        raise SingularityError(
            f"covariance on H is not positive definite (condition number {np.linalg.cond(M):.3g})"
        ) from None
    cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond > 1e14:
        raise SingularityError(f"covariance on H is singular (condition number {cond:.3g})")
    stat = float(n * d @ linalg.cho_solve(c, d))
    h = d.shape[0]
    return Chi2Result(stat, h, float(stats.chi2.sf(stat, h)))


def studentized_statistic(
    alpha: np.ndarray,
    b_hat: np.ndarray,
    beta_null: np.ndarray,
    sandwich: SandwichMatrix,
    n: int,
) -> float:
    """``sqrt(n) alpha'(b - beta) / sqrt(alpha' M alpha)`` with alpha restricted to H.

    ``alpha`` may be given on all p coordinates (support must lie in H) or
    directly on H; ``b_hat`` and ``beta_null`` are indexed like H.
    """
    alpha = np.asarray(alpha, dtype=float)
    H = list(sandwich.H)
    if alpha.shape[0] != len(H):
        outside = np.setdiff1d(np.flatnonzero(alpha), H)
        if outside.size:
            raise InputError(f"alpha has support outside H at {outside.tolist()}")
        alpha = alpha[H]
    if abs(np.linalg.norm(alpha) - 1.0) > 1e-10:
        raise InputError("alpha must have unit Euclidean norm")
    den = float(alpha @ sandwich.values @ alpha)
    if not den > 0:
        raise SingularityError("zero variance in the direction alpha")
    diff = np.asarray(b_hat, dtype=float) - np.asarray(beta_null, dtype=float)
    return math.sqrt(n) * float(alpha @ diff) / math.sqrt(den)


@dataclass(frozen=True)
class DeltaReport:
    delta: np.ndarray
    max_abs: float
    bound: float


def delta_remainder(dataset: Dataset, fit, theta: ThetaRows, truth: np.ndarray) -> DeltaReport:
    """``sqrt(n)(Theta Sigma - I)(beta_hat - beta_0)`` on H with its Hoelder bound."""
    d = _beta(fit) - np.asarray(truth, dtype=float)
    X = dataset.X
    rows = theta.rows @ X.T @ X / dataset.n
    rows[np.arange(len(theta.H)), list(theta.H)] -= 1.0
    delta = math.sqrt(dataset.n) * rows @ d
    bound = float(np.abs(rows).max() * math.sqrt(dataset.n) * np.abs(d).sum())
    return DeltaReport(delta, float(np.abs(delta).max()), bound)


@dataclass(frozen=True, eq=False)
class InferenceReport:
    H: tuple[int, ...]
    b_hat: np.ndarray
    sigma_hat: np.ndarray
    intervals: np.ndarray
    level: float
    chi2: Chi2Result | None = None
    null_values: tuple[float, ...] | None = None
    sandwich: SandwichMatrix | None = field(default=None, repr=False)
    theta: ThetaRows | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        out = {
            "H": [j + 1 for j in self.H],
            "b_hat": [float(v) for v in self.b_hat],
            "sigma_hat": [float(v) for v in self.sigma_hat],
            "intervals": [[float(lo), float(hi)] for lo, hi in self.intervals],
            "level": self.level,
        }
        if self.chi2 is not None:
            out["chi2"] = {
                "stat": self.chi2.statistic,
                "dof": self.chi2.dof,
                "pvalue": self.chi2.pvalue,
            }
            out["null"] = list(self.null_values)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def infer(
    dataset: Dataset,
    fit,
    H: Sequence[int],
    config: TuningConfig | None = None,
    *,
    null_values: Sequence[float] | None = None,
    delta: float = 0.05,
    method: str = "conservative",
    theta: ThetaRows | None = None,
) -> InferenceReport:
    """Full inference on the coordinates ``H`` for an already fitted model."""
    config = config or TuningConfig()
    if theta is None:
        theta = build_theta_rows(dataset, H, config, method)
    b = desparsify(dataset, fit, theta)
    M = sandwich_covariance(dataset, fit, theta)
    ci = confidence_intervals(b, M, dataset.n, delta)
    chi = None
    if null_values is not None:
        null_values = tuple(float(v) for v in null_values)
        chi = chi2_test(b, null_values, M, dataset.n)
    return InferenceReport(
        H=tuple(theta.H),
        b_hat=b,
        sigma_hat=M.sigma_hat,
        intervals=ci,
        level=1.0 - delta,
        chi2=chi,
        null_values=null_values,
        sandwich=M,
        theta=theta,
    )
