"""Two-stage conservative Lasso: plain Lasso, clamped weights, weighted refit."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Dataset, TuningConfig
from .solver import GramCache, LassoFit
from .tuning import BicTrace, conservative_weights, select_conservative, select_lasso

__all__ = [
    "ConservativeFit",
    "OracleBoundReport",
    "conservative_weights",
    "fit_conservative",
    "oracle_bound_check",
]


@dataclass(frozen=True, eq=False)
class ConservativeFit:
    stage1: LassoFit
    weights: np.ndarray
    stage2: LassoFit
    lambda_prec: float
    stage1_trace: BicTrace = field(repr=False)
    stage2_trace: BicTrace = field(repr=False)

    @property
    def beta(self) -> np.ndarray:
        return self.stage2.beta

    @property
    def lambda_stage1(self) -> float:
        return self.stage1.lam

    @property
    def lambda_stage2(self) -> float:
        return self.stage2.lam


def fit_conservative(
    dataset: Dataset,
    config: TuningConfig | None = None,
    *,
    stage1: tuple[LassoFit, BicTrace] | None = None,
    cache: GramCache | None = None,
) -> ConservativeFit:
    """BIC-tuned Lasso followed by the BIC-tuned weighted refit.

    ``stage1`` may pass an already computed ``select_lasso`` result so the
    plain Lasso is not refitted when both estimators are needed.
    """
    config = config or TuningConfig()
    cache = cache or GramCache(dataset)
    lasso, trace1 = stage1 if stage1 is not None else select_lasso(dataset, config, cache=cache)
    fit2, w, trace2 = select_conservative(dataset, config, lasso, cache=cache)
    # w <= 1 means the refit never penalises a coordinate more than the Lasso would
    assert np.all(fit2.lam * w <= fit2.lam * (1 + 1e-15))
    return ConservativeFit(
        stage1=lasso,
        weights=w,
        stage2=fit2,
        lambda_prec=float(trace2.best.lambda_prec),
        stage1_trace=trace1,
        stage2_trace=trace2,
    )


@dataclass(frozen=True)
class OracleBoundReport:
    l1_error: float
    prediction_error: float
    l1_bound: float
    prediction_bound: float
    l1_ok: bool
    prediction_ok: bool
    s0: int


def oracle_bound_check(
    dataset: Dataset,
    beta_hat: np.ndarray,
    truth: np.ndarray,
    lam: float,
    sigma_min_lower: float,
) -> OracleBoundReport:
    """Compare estimation errors with the oracle-inequality bounds.

    Bounds are ``24 lam s0 / phi`` for the l1 error and ``18 lam^2 s0 / phi``
    for ``||X(b - b0)||_n^2`` with ``phi`` a lower bound on the restricted
    eigenvalue (the smallest eigenvalue of the population covariance works).
    A failed check is informational: the bounds hold with high probability.
    """
    if not sigma_min_lower > 0:
        raise ValueError("sigma_min_lower must be positive")
    beta_hat = np.asarray(beta_hat, dtype=float)
    truth = np.asarray(truth, dtype=float)
    d = beta_hat - truth
    s0 = int(np.count_nonzero(truth))
    l1 = float(np.abs(d).sum())
    pred = float(np.sum((dataset.X @ d) ** 2) / dataset.n)
    l1_bound = 24.0 * lam * s0 / sigma_min_lower
    pred_bound = 18.0 * lam**2 * s0 / sigma_min_lower
    return OracleBoundReport(
        l1_error=l1,
        prediction_error=pred,
        l1_bound=l1_bound,
        prediction_bound=pred_bound,
        l1_ok=l1 <= l1_bound,
        prediction_ok=pred <= pred_bound,
        s0=s0,
    )
