"""Approximate inverse of the Gram matrix from nodewise regressions.

Row ``j`` of ``Theta_hat`` comes from regressing ``X_j`` on the other
columns: with coefficients ``gamma_j`` and penalised residual variance

    tau_j^2 = ||X_j - X_{-j} gamma_j||_n^2 + lambda_node * ||Gamma_j gamma_j||_1,

the row is ``+1/tau_j^2`` at position ``j`` and ``-gamma_{j,k}/tau_j^2``
elsewhere. The KKT conditions of the nodewise problem then give
``(Theta_j' Sigma_hat)_j = 1`` and an off-diagonal sup-norm of at most
``lambda_node / tau_j^2``. Only the rows in ``H`` are ever built.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import Dataset, TuningConfig, gram, log_grid
from .errors import ConvergenceError, InputError, SingularityError
from .solver import GramCache, LassoFit, fit_weighted_lasso
from .tuning import bic_score, conservative_weights, fit_path

__all__ = [
    "NodewiseFit",
    "NodewiseStage1",
    "ThetaRows",
    "PopulationTheta",
    "fit_nodewise",
    "nodewise_stage1",
    "select_lambda_node",
    "build_theta_rows",
    "theta_population_reference",
]

TAU_FLOOR = 1e-12
# KKT tolerance for the final nodewise fits; the exact-diagonal identity
# is only as good as the stationarity of these fits.
FINAL_KKT = 1e-11


@dataclass(frozen=True, eq=False)
class NodewiseFit:
    j: int
    gamma_lasso: np.ndarray
    gamma: np.ndarray
    weight_diag: np.ndarray
    tau_sq: float
    lambda_node: float
    lambda_node_stage1: float
    lambda_prec: float | None
    kkt_stage1: float
    kkt_stage2: float

    @property
    def support_size(self) -> int:
        return int(np.count_nonzero(self.gamma))

    def theta_row(self) -> np.ndarray:
        p = self.gamma.shape[0] + 1
        row = np.empty(p)
        row[self.j] = 1.0
        row[np.r_[0 : self.j, self.j + 1 : p]] = -self.gamma
        return row / self.tau_sq


@dataclass(frozen=True, eq=False)
class ThetaRows:
    """Rows ``Theta_hat_j`` for ``j`` in ``H`` (in the order of ``H``)."""

    H: tuple[int, ...]
    rows: np.ndarray
    tau_sq: np.ndarray
    lambda_node: float
    method: str
    fits: tuple[NodewiseFit, ...] = field(repr=False)
    lambda_prec: float | None = None

    def identity_errors(self, dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
        """Per row: ``|(Theta_j' Sigma)_j - 1|`` and ``max_{k != j} |(Theta_j' Sigma)_k|``."""
        M = self.rows @ dataset.X.T @ dataset.X / dataset.n
        h = len(self.H)
        diag = np.abs(M[np.arange(h), list(self.H)] - 1.0)
        off = M.copy()
        off[np.arange(h), list(self.H)] = 0.0
        return diag, np.abs(off).max(axis=1)

    def offdiag_bounds(self) -> np.ndarray:
        """``lambda_node / tau_j^2`` plus slack from the stage-2 KKT violation."""
        viol = np.array([f.kkt_stage2 for f in self.fits])
        return self.lambda_node * (1.0 + viol) / self.tau_sq


@dataclass(frozen=True, eq=False)
class NodewiseStage1:
    """Plain-Lasso nodewise paths for every ``j`` in ``H`` over a shared grid."""

    H: tuple[int, ...]
    grid: tuple[float, ...]
    datasets: dict = field(repr=False)
    caches: dict = field(repr=False)
    paths: dict = field(repr=False)
    selected: int = 0

    @property
    def lambda_node(self) -> float:
        return self.grid[self.selected]

    def fit(self, j: int) -> LassoFit:
        return self.paths[j][self.selected]


def _check_H(dataset: Dataset, H: Sequence[int]) -> tuple[int, ...]:
    H = tuple(int(j) for j in H)
    if not H:
        raise InputError("H must be non-empty")
    if len(set(H)) != len(H):
        raise InputError(f"indices in H must be distinct, got {H}")
    if dataset.p < 2:
        raise InputError("nodewise regression needs p >= 2")
    for j in H:
        if not 0 <= j < dataset.p:
            raise InputError(f"index {j} out of range for p={dataset.p}")
    return H


def _node_grid(dataset: Dataset, H, config: TuningConfig) -> tuple[float, ...]:
    if config.lambda_node_grid is not None:
        return tuple(sorted(set(config.lambda_node_grid), reverse=True))
    G = gram(dataset)
    lmax = 0.0
    for j in H:
        col = np.abs(G[:, j]).copy()
        col[j] = 0.0
        lmax = max(lmax, float(col.max()))
    return log_grid(lmax, config.n_lambda, config.lambda_min_ratio)


def _summed_choice(
    scores: np.ndarray, ok: np.ndarray, sat: np.ndarray, keys: list[tuple]
) -> int:
    """Index minimising summed BIC.

    Saturated and then degenerate (-inf) totals are only used as fallbacks.
    """
    valid = [i for i in range(len(keys)) if ok[i]]
    if not valid:
        raise ConvergenceError("no nodewise grid point converged for every j")
    finite = [i for i in valid if math.isfinite(scores[i])]
    pool = [i for i in finite if not sat[i]] or finite or valid
    return min(pool, key=lambda i: (scores[i], *keys[i]))


def _accumulate(dataset, paths, H, m, config):
    """Summed BIC, all-converged and any-saturated masks over a grid of size ``m``.

    Grid points missing from a truncated path count as not converged.
    """
    scores = np.zeros(m)
    ok = np.zeros(m, dtype=bool)
    ok[:] = True
    sat = np.zeros(m, dtype=bool)
    limit = config.max_df(dataset.n)
    for j in H:
        dj, path = paths[j]
        ok[len(path):] = False
        for i, f in enumerate(path):
            scores[i] += bic_score(dj, f)
            ok[i] &= f.converged
            sat[i] |= f.df > limit
    return scores, ok, sat


def nodewise_stage1(
    dataset: Dataset, H: Sequence[int], config: TuningConfig | None = None
) -> NodewiseStage1:
    """Plain-Lasso nodewise paths and the shared BIC-selected ``lambda_node``."""
    config = config or TuningConfig()
    H = _check_H(dataset, H)
    grid = _node_grid(dataset, H, config)
    datasets, caches, paths = {}, {}, {}
    for j in H:
        dj = dataset.without_column(j)
        datasets[j] = dj
        caches[j] = GramCache(dj)
        paths[j] = fit_path(dj, grid, None, config, caches[j])
    scores, ok, sat = _accumulate(
        dataset, {j: (datasets[j], paths[j]) for j in H}, H, len(grid), config
    )
    k = _summed_choice(scores, ok, sat, [(lam,) for lam in grid])
    return NodewiseStage1(H, grid, datasets, caches, paths, k)


def select_lambda_node(
    dataset: Dataset, H: Sequence[int], config: TuningConfig | None = None
) -> float:
    """Shared ``lambda_node`` minimising the BIC summed over the first-stage fits."""
    return nodewise_stage1(dataset, H, config).lambda_node


def _tau_sq(dj: Dataset, gamma: np.ndarray, weights: np.ndarray, lam: float) -> float:
    r = dj.Y - dj.X @ gamma
    return float(r @ r / dj.n + lam * np.sum(weights * np.abs(gamma)))


def _assemble(
    j: int, dj: Dataset, stage1: LassoFit, stage2: LassoFit, lambda_prec: float | None
) -> NodewiseFit:
    tau = _tau_sq(dj, stage2.beta, stage2.weights, stage2.lam)
    if not tau > TAU_FLOOR:
        raise SingularityError(
            f"nodewise regression for column {j} has tau^2 = {tau:.3g}; Theta row undefined"
        )
    return NodewiseFit(
        j=j,
        gamma_lasso=stage1.beta,
        gamma=stage2.beta,
        weight_diag=stage2.weights,
        tau_sq=tau,
        lambda_node=stage2.lam,
        lambda_node_stage1=stage1.lam,
        lambda_prec=lambda_prec,
        kkt_stage1=stage1.max_violation,
        kkt_stage2=stage2.max_violation,
    )


def _final(dj, lam, weights, config, start, cache) -> LassoFit:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return fit_weighted_lasso(
            dj, lam, weights, config, warm_start=start, cache=cache, polish=True,
            kkt_tolerance=min(config.kkt_tolerance, FINAL_KKT),
        )


def fit_nodewise(
    dataset: Dataset,
    j: int,
    config: TuningConfig | None = None,
    lambda_node: float | None = None,
    lambda_prec: float | None = None,
    *,
    lambda_node_stage1: float | None = None,
    method: str = "conservative",
) -> NodewiseFit:
    """One nodewise regression of column ``j`` on the rest.

    The first stage is a plain Lasso at ``lambda_node_stage1`` (default
    ``lambda_node``). With ``method="conservative"`` the second stage uses
    weights ``lambda_prec / max(|gamma_L,k|, lambda_prec)``; when
    ``lambda_prec`` is omitted it is chosen by BIC over
    ``config.lambda_prec_grid``. ``method="lasso"`` stops after stage one.
    """
    config = config or TuningConfig()
    if method not in ("conservative", "lasso"):
        raise InputError(f"unknown nodewise method {method!r}")
    _check_H(dataset, [j])
    if lambda_node is None:
        lambda_node = select_lambda_node(dataset, [j], config)
    lam1 = lambda_node if lambda_node_stage1 is None else lambda_node_stage1
    dj = dataset.without_column(j)
    cache = GramCache(dj)
    s1 = _final(dj, lam1, None, config, None, cache)
    if method == "lasso":
        return _assemble(j, dj, s1, s1, None)
    if lambda_prec is None:
        best = None
        for lp in sorted(set(config.lambda_prec_grid)):
            f = _final(dj, lambda_node, conservative_weights(s1.beta, lp), config, s1.beta, cache)
            score = (bic_score(dj, f), lp)
            if best is None or score < best[0]:
                best = (score, f, lp)
        _, s2, lambda_prec = best
    else:
        w = conservative_weights(s1.beta, lambda_prec)
        s2 = _final(dj, lambda_node, w, config, s1.beta, cache)
    return _assemble(j, dj, s1, s2, lambda_prec)


def build_theta_rows(
    dataset: Dataset,
    H: Sequence[int],
    config: TuningConfig | None = None,
    method: str = "conservative",
    *,
    stage1: NodewiseStage1 | None = None,
) -> ThetaRows:
    """Rows of ``Theta_hat`` for ``j`` in ``H``.

    ``method="lasso"`` uses the plain-Lasso nodewise fits at the shared
    BIC-selected ``lambda_node``. ``method="conservative"`` takes weights
    from those first-stage fits and re-tunes ``(lambda_node, lambda_prec)``
    jointly by BIC summed over ``H``; the same pair is used for every row.
    """
    config = config or TuningConfig()
    if method not in ("conservative", "lasso"):
        raise InputError(f"unknown nodewise method {method!r}")
    H = _check_H(dataset, H)
    if stage1 is None or stage1.H != H:
        stage1 = nodewise_stage1(dataset, H, config)

    if method == "lasso":
        fits = []
        for j in H:
            dj = stage1.datasets[j]
            s1 = _final(dj, stage1.lambda_node, None, config, stage1.fit(j).beta, stage1.caches[j])
            fits.append(_assemble(j, dj, s1, s1, None))
        rows = _rows(dataset, H, fits, stage1.lambda_node, method, None)
        return rows

    grid = stage1.grid
    precs = sorted(set(config.lambda_prec_grid))
    first = {j: stage1.fit(j) for j in H}
    scores = np.zeros((len(precs), len(grid)))
    ok = np.ones((len(precs), len(grid)), dtype=bool)
    sat = np.zeros((len(precs), len(grid)), dtype=bool)
    paths: dict[tuple[int, int], list[LassoFit]] = {}
    done: dict[tuple[int, bytes], list[LassoFit]] = {}
    for a, lp in enumerate(precs):
        for j in H:
            w = conservative_weights(first[j].beta, lp)
            key = (j, w.tobytes())
            if key not in done:
                # distinct thresholds often give identical weights
                done[key] = fit_path(stage1.datasets[j], grid, w, config, stage1.caches[j])
            paths[a, j] = done[key]
        scores[a], ok[a], sat[a] = _accumulate(
            dataset, {j: (stage1.datasets[j], paths[a, j]) for j in H}, H, len(grid), config
        )
    keys = [(grid[i], precs[a]) for a in range(len(precs)) for i in range(len(grid))]
    k = _summed_choice(scores.ravel(), ok.ravel(), sat.ravel(), keys)
    a, i = divmod(k, len(grid))
    lam, lp = grid[i], precs[a]
    fits = []
    for j in H:
        dj = stage1.datasets[j]
        s1 = _final(dj, first[j].lam, None, config, first[j].beta, stage1.caches[j])
        start = paths[a, j][i]
        s2 = _final(dj, lam, start.weights, config, start.beta, stage1.caches[j])
        fits.append(_assemble(j, dj, s1, s2, lp))
    return _rows(dataset, H, fits, lam, method, lp)


def _rows(dataset, H, fits, lam, method, lp) -> ThetaRows:
    rows = np.vstack([f.theta_row() for f in fits])
    theta = ThetaRows(
        H=H,
        rows=rows,
        tau_sq=np.array([f.tau_sq for f in fits]),
        lambda_node=float(lam),
        method=method,
        fits=tuple(fits),
        lambda_prec=lp,
    )
    diag, off = theta.identity_errors(dataset)
    bound = theta.offdiag_bounds()
    if np.any(diag > 1e-10) or np.any(off > bound + 1e-10):
        warnings.warn(
            "Theta rows violate the nodewise identities beyond round-off "
            f"(diag error {diag.max():.2e}, off-diagonal excess {np.max(off - bound):.2e})",
            RuntimeWarning,
            stacklevel=3,
        )
    return theta


@dataclass(frozen=True, eq=False)
class PopulationTheta:
    """Exact nodewise quantities from a known covariance matrix."""

    H: tuple[int, ...]
    rows: np.ndarray
    tau_sq: np.ndarray
    gamma: tuple[np.ndarray, ...]
    supports: tuple[np.ndarray, ...]

    @property
    def s(self) -> np.ndarray:
        return np.array([len(S) for S in self.supports])

    @property
    def s_bar(self) -> int:
        return int(self.s.max())


def theta_population_reference(
    sigma: np.ndarray, H: Sequence[int], zero_tol: float = 1e-12
) -> PopulationTheta:
    """``Theta = Sigma^{-1}`` rows, ``tau_j^2 = 1/Theta_jj`` and projection coefficients."""
    sigma = np.asarray(sigma, dtype=float)
    p = sigma.shape[0]
    if sigma.shape != (p, p) or not np.allclose(sigma, sigma.T, atol=1e-12):
        raise InputError("sigma must be a symmetric square matrix")
    H = tuple(int(j) for j in H)
    try:
        np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        raise SingularityError("sigma is not positive definite") from None
    rows, taus, gammas, supports = [], [], [], []
    for j in H:
        rest = np.r_[0:j, j + 1 : p]
        g = np.linalg.solve(sigma[np.ix_(rest, rest)], sigma[rest, j])
        tau = float(sigma[j, j] - sigma[j, rest] @ g)
        row = np.empty(p)
        row[j] = 1.0
        row[rest] = -g
        row /= tau
        rows.append(row)
        taus.append(tau)
        gammas.append(g)
        supports.append(np.flatnonzero(np.abs(row) > zero_tol))
    return PopulationTheta(H, np.vstack(rows), np.array(taus), tuple(gammas), tuple(supports))
