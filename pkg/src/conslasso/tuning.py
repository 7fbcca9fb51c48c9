"""BIC selection of the penalty levels.

The score is the Gaussian-likelihood BIC ``n ln(||Y - X b||_n^2) + df ln(n)``
with ``df`` the number of nonzero coefficients. Grids are evaluated as
warm-started descending paths; ties go to the smallest lambda, then the
smallest weight threshold, so the result does not depend on grid order.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import Dataset, TuningConfig, log_grid
from .errors import ConvergenceError
from .solver import GramCache, LassoFit, fit_weighted_lasso, lambda_max

__all__ = [
    "BicEntry",
    "BicTrace",
    "bic_score",
    "lambda_grid_for",
    "fit_path",
    "select_lasso",
    "select_conservative",
    "conservative_weights",
]


def conservative_weights(beta_lasso: np.ndarray, lambda_prec: float) -> np.ndarray:
    """Weights ``lambda_prec / max(|beta_j|, lambda_prec)``.

    Coordinates the first stage left at (or near) zero keep the full
    penalty ``w_j = 1``; large first-stage coefficients are penalised less.
    """
    if not lambda_prec > 0:
        raise ValueError("lambda_prec must be positive")
    b = np.abs(np.asarray(beta_lasso, dtype=float))
    return lambda_prec / np.maximum(b, lambda_prec)


def bic_score(dataset: Dataset, fit: LassoFit) -> float:
    """BIC of a fit; ``-inf`` flags a perfect (zero-residual) fit."""
    A = np.flatnonzero(fit.beta)
    r = dataset.Y - dataset.X[:, A] @ fit.beta[A]
    ssr_n = float(r @ r) / dataset.n
    n = dataset.n
    if ssr_n <= 0.0:
        return -math.inf
    return n * math.log(ssr_n) + fit.df * math.log(n)


@dataclass(frozen=True, eq=False)
class BicEntry:
    lam: float
    lambda_prec: float | None
    bic: float
    df: int
    converged: bool
    fit: LassoFit = field(repr=False)
    saturated: bool = False

    @property
    def degenerate(self) -> bool:
        return self.bic == -math.inf


@dataclass(frozen=True, eq=False)
class BicTrace:
    """All evaluated grid points and the index of the selected one."""

    entries: tuple[BicEntry, ...]
    selected: int

    @property
    def best(self) -> BicEntry:
        return self.entries[self.selected]

    def to_dict(self) -> dict:
        return {
            "selected": self.selected,
            "entries": [
                {
                    "lambda": e.lam,
                    "lambda_prec": e.lambda_prec,
                    "bic": None if e.degenerate else e.bic,
                    "degenerate": e.degenerate,
                    "df": e.df,
                    "converged": e.converged,
                    "saturated": e.saturated,
                }
                for e in self.entries
            ],
        }


def _select(entries: list[BicEntry]) -> int:
    ok = [i for i, e in enumerate(entries) if e.converged]
    if not ok:
        raise ConvergenceError("no fit on the tuning grid converged")
    # fallbacks in order: saturated fits, then zero-residual fits
    pool = [i for i in ok if not entries[i].degenerate and not entries[i].saturated]
    pool = pool or [i for i in ok if not entries[i].degenerate] or ok

    def key(i: int):
        e = entries[i]
        return (e.bic, e.lam, -math.inf if e.lambda_prec is None else e.lambda_prec)

    return min(pool, key=key)


def lambda_grid_for(
    dataset: Dataset, config: TuningConfig, weights: np.ndarray | None = None
) -> tuple[float, ...]:
    """The configured grid, or the default log grid below ``lambda_max``.

    With ``weights`` and ``config.stage2_grid == "weighted"`` the default grid
    starts at the weighted ``lambda_max``, the smallest penalty that zeroes
    every coefficient of the weighted problem.
    """
    if config.lambda_grid is not None:
        return config.lambda_grid
    if weights is None or config.stage2_grid == "shared":
        top = lambda_max(dataset)
    else:
        top = lambda_max(dataset, weights)
    return log_grid(top, config.n_lambda, config.lambda_min_ratio)


def fit_path(
    dataset: Dataset,
    grid,
    weights: np.ndarray | None,
    config: TuningConfig,
    cache: GramCache | None = None,
    warm: bool = True,
) -> list[LassoFit]:
    """Fits along ``grid`` in descending order (returned in that order).

    The path stops after the first fit whose support exceeds
    ``config.max_df(n)``; smaller grid values are then not evaluated.
    """
    cache = cache or GramCache(dataset)
    lams = sorted(set(float(v) for v in grid), reverse=True)
    fits = []
    beta = None
    with warnings.catch_warnings():
        # non-convergence is recorded on each fit and handled by selection
        warnings.simplefilter("ignore", RuntimeWarning)
        for lam in lams:
            fit = fit_weighted_lasso(
                dataset, lam, weights, config, warm_start=beta if warm else None,
                cache=cache, polish=False,
            )
            fits.append(fit)
            beta = fit.beta
            if fit.df > config.max_df(dataset.n):
                break
    return fits


def _entry(dataset, fit: LassoFit, lp, config) -> BicEntry:
    sat = fit.df > config.max_df(dataset.n)
    return BicEntry(fit.lam, lp, bic_score(dataset, fit), fit.df, fit.converged, fit, sat)


def _finalize(dataset, entry: BicEntry, config, cache) -> LassoFit:
    """Polish the selected fit (cheap: it starts at the solution)."""
    if not config.polish:
        return entry.fit
    fit = entry.fit
    return fit_weighted_lasso(
        dataset, fit.lam, fit.weights, config, warm_start=fit.beta, cache=cache, polish=True
    )


def select_lasso(
    dataset: Dataset, config: TuningConfig | None = None, *, cache: GramCache | None = None,
    warm: bool = True,
) -> tuple[LassoFit, BicTrace]:
    """Plain Lasso with ``lambda`` chosen by BIC over ``config.lambda_grid``."""
    config = config or TuningConfig()
    cache = cache or GramCache(dataset)
    fits = fit_path(dataset, lambda_grid_for(dataset, config), None, config, cache, warm)
    entries = [_entry(dataset, f, None, config) for f in fits]
    k = _select(entries)
    return _finalize(dataset, entries[k], config, cache), BicTrace(tuple(entries), k)


def select_conservative(
    dataset: Dataset,
    config: TuningConfig | None = None,
    stage1: LassoFit | None = None,
    *,
    cache: GramCache | None = None,
    warm: bool = True,
) -> tuple[LassoFit, np.ndarray, BicTrace]:
    """Weighted refit tuned jointly over ``lambda`` and ``lambda_prec``.

    For each ``lambda_prec`` the weights are fixed and ``lambda`` runs over
    ``lambda_grid_for(dataset, config, weights)``. Weights come from the single BIC-selected first-stage Lasso ``stage1``
    (computed here when not supplied). Returns the BIC-minimising fit, its
    weights and the full trace.
    """
    config = config or TuningConfig()
    cache = cache or GramCache(dataset)
    if stage1 is None:
        stage1, _ = select_lasso(dataset, config, cache=cache, warm=warm)
    entries: list[BicEntry] = []
    seen: dict[bytes, list[LassoFit]] = {}
    for lp in sorted(set(config.lambda_prec_grid)):
        w = conservative_weights(stage1.beta, lp)
        key = w.tobytes()
        # distinct thresholds often give identical weights (e.g. all ones)
        fits = seen.get(key)
        if fits is None:
            grid = lambda_grid_for(dataset, config, w)
            fits = seen[key] = fit_path(dataset, grid, w, config, cache, warm)
        entries.extend(
            _entry(dataset, f, lp, config) for f in fits
        )
    k = _select(entries)
    best = entries[k]
    return _finalize(dataset, best, config, cache), best.fit.weights, BicTrace(tuple(entries), k)
