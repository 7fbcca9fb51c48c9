"""Cyclic coordinate descent for the weighted Lasso.

Minimises ``||Y - X b||_n^2 + 2 lam sum_j w_j |b_j|`` where
``||v||_n^2 = v'v / n``. The same kernel serves the plain Lasso (``w = 1``),
the conservative Lasso and every nodewise regression.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numba as nb
import numpy as np

from .core import Dataset
from .errors import InputError, NumericalError

__all__ = [
    "LassoFit",
    "KktCertificate",
    "soft_threshold",
    "fit_weighted_lasso",
    "kkt_check",
    "lambda_max",
    "objective",
    "GramCache",
]


def soft_threshold(z: float, t: float) -> float:
    """``sign(z) * max(|z| - t, 0)``."""
    if t < 0:
        raise InputError("threshold must be nonnegative")
    if z > t:
        return z - t
    if z < -t:
        return z + t
    return 0.0


@nb.njit(cache=True, nogil=True)
def _gram_col(X, j, out):
    n, p = X.shape
    for k in range(p):
        s = 0.0
        for i in range(n):
            s += X[i, k] * X[i, j]
        out[k] = s / n


@nb.njit(cache=True, nogil=True)
def _violation(g, beta, pen, col_sq):
    worst = 0.0
    for j in range(beta.shape[0]):
        if col_sq[j] == 0.0:
            continue
        kappa = g[j] / pen[j]
        if beta[j] > 0.0:
            v = abs(kappa - 1.0)
        elif beta[j] < 0.0:
            v = abs(kappa + 1.0)
        else:
            v = abs(kappa) - 1.0
        if v > worst:
            worst = v
    return worst


@nb.njit(cache=True, nogil=True)
def _sweep(X, g, beta, pen, col_sq, slot, cols, ncached, idx, m):
    """One cyclic pass over idx[:m]; returns (largest change, cache-full flag)."""
    p = beta.shape[0]
    biggest = 0.0
    for t in range(m):
        j = idx[t]
        cj = col_sq[j]
        if cj == 0.0:
            continue
        old = beta[j]
        z = g[j] + cj * old
        pj = pen[j]
        if z > pj:
            new = (z - pj) / cj
        elif z < -pj:
            new = (z + pj) / cj
        else:
            new = 0.0
        d = new - old
        if d != 0.0:
            k = slot[j]
            if k < 0:
                if ncached[0] >= cols.shape[1]:
                    return biggest, True
                k = ncached[0]
                _gram_col(X, j, cols[:, k])
                slot[j] = k
                ncached[0] += 1
            for q in range(p):
                g[q] -= d * cols[q, k]
            beta[j] = new
            ad = abs(d)
            if ad > biggest:
                biggest = ad
    return biggest, False


@nb.njit(cache=True, nogil=True)
def _sweep_support(g, beta, pen, col_sq, slot, cols, active, m):
    """Cyclic pass over the support only; ``g`` is kept current on the support."""
    biggest = 0.0
    for t in range(m):
        j = active[t]
        cj = col_sq[j]
        old = beta[j]
        z = g[j] + cj * old
        pj = pen[j]
        if z > pj:
            new = (z - pj) / cj
        elif z < -pj:
            new = (z + pj) / cj
        else:
            new = 0.0
        d = new - old
        if d != 0.0:
            k = slot[j]
            for u in range(m):
                q = active[u]
                g[q] -= d * cols[q, k]
            beta[j] = new
            ad = abs(d)
            if ad > biggest:
                biggest = ad
    return biggest


@nb.njit(cache=True, nogil=True)
def _penalised(beta, pen):
    q = 0.0
    for j in range(beta.shape[0]):
        q += pen[j] * abs(beta[j])
    return 2.0 * q


@nb.njit(cache=True, nogil=True)
def _cd(X, g, beta, pen, col_sq, slot, cols, ncached, tol, kkt_tol, max_sweeps, trace, yy, xty):
    """Active-set cyclic coordinate descent in covariance mode.

    ``g`` holds the gradient ``X'(y - X beta)/n`` on entry and is updated
    in place through cached Gram columns. Alternates a full sweep with
    sweeps over the current support. Convergence needs a full sweep whose
    largest change is <= tol *and* a KKT violation <= kkt_tol; if only the
    change test passes, the change tolerance is tightened tenfold.

    ``trace`` receives the objective after each sweep, using
    ``||r||_n^2 = y'y/n - beta'X'y/n - beta'g`` so no residual is formed.
    Returns (sweeps, converged, trace entries, cache-full flag).
    """
    p = beta.shape[0]
    all_idx = np.arange(p)
    active = np.empty(p, dtype=np.int64)
    start = np.empty(p)
    on = np.zeros(p, dtype=np.bool_)
    sweeps = 0
    ntr = 0
    cur_tol = tol
    converged = False
    full = False
    while sweeps < max_sweeps:
        change, full = _sweep(X, g, beta, pen, col_sq, slot, cols, ncached, all_idx, p)
        if full:
            break
        if ntr < trace.shape[0]:
            trace[ntr] = _smooth(g, beta, yy, xty) + _penalised(beta, pen)
            ntr += 1
        sweeps += 1
        if change <= cur_tol:
            if _violation(g, beta, pen, col_sq) <= kkt_tol:
                converged = True
                break
            cur_tol *= 0.1
            if cur_tol < 1e-300:
                break
            continue
        m = 0
        for j in range(p):
            if beta[j] != 0.0:
                active[m] = j
                m += 1
                on[j] = True
        for u in range(m):
            start[u] = beta[active[u]]
        while sweeps < max_sweeps:
            change = _sweep_support(g, beta, pen, col_sq, slot, cols, active, m)
            sweeps += 1
            if ntr < trace.shape[0]:
                # off-support gradient is stale but unused by the objective
                trace[ntr] = _smooth(g, beta, yy, xty) + _penalised(beta, pen)
                ntr += 1
            if change <= cur_tol:
                break
        # bring the off-support gradient up to date
        for u in range(m):
            j = active[u]
            d = beta[j] - start[u]
            if d != 0.0:
                k = slot[j]
                for q in range(p):
                    if not on[q]:
                        g[q] -= d * cols[q, k]
        for u in range(m):
            on[active[u]] = False
    return sweeps, converged, ntr, full


@nb.njit(cache=True, nogil=True)
def _smooth(g, beta, yy, xty):
    a = 0.0
    for j in range(beta.shape[0]):
        if beta[j] != 0.0:
            a += beta[j] * (xty[j] + g[j])
    return yy - a


@dataclass(frozen=True, eq=False)
class LassoFit:
    """Solution of one weighted Lasso problem."""

    beta: np.ndarray
    lam: float
    weights: np.ndarray
    objective: float
    iterations: int
    converged: bool
    max_violation: float

    @property
    def active_set(self) -> np.ndarray:
        return np.flatnonzero(self.beta)

    @property
    def df(self) -> int:
        return int(np.count_nonzero(self.beta))

    @property
    def penalties(self) -> np.ndarray:
        return self.lam * self.weights


@dataclass(frozen=True, eq=False)
class KktCertificate:
    """Subgradient estimate ``kappa = X'(Y - X b) / (n lam w)`` and its worst violation."""

    kappa: np.ndarray
    max_violation: float


def lambda_max(dataset: Dataset, weights: np.ndarray | None = None) -> float:
    """Smallest lambda for which the zero vector solves the (weighted) problem."""
    g = np.abs(dataset.X.T @ dataset.Y) / dataset.n
    if weights is not None:
        g = g / weights
    return float(g.max()) if g.size else 0.0


def objective(dataset: Dataset, beta: np.ndarray, lam: float, weights: np.ndarray) -> float:
    r = dataset.Y - dataset.X @ beta
    return float(r @ r / dataset.n + 2.0 * lam * np.sum(weights * np.abs(beta)))


class GramCache:
    """Lazily computed columns of ``X'X/n`` plus ``X'Y/n`` for one dataset.

    Sharing a cache across all fits on the same data (a lambda path, the
    conservative product grid) means each column is formed at most once.
    Not thread-safe; use one cache per worker.
    """

    DENSE_LIMIT = 2500

    def __init__(self, dataset: Dataset, capacity: int | None = None):
        self.dataset = dataset
        n, p = dataset.n, dataset.p
        X = dataset.X
        self.col_sq = np.einsum("ij,ij->j", X, X) / n
        self.xty = X.T @ dataset.Y / n
        self.yy = float(dataset.Y @ dataset.Y / n)
        if capacity is None and p <= self.DENSE_LIMIT:
            # One BLAS product beats forming columns one at a time.
            self.cols = np.asfortranarray(X.T @ X / n)
            self.slot = np.arange(p, dtype=np.int64)
            self.ncached = np.array([p], dtype=np.int64)
            return
        cap = min(p, capacity or max(n + 64, 256))
        self.slot = np.full(p, -1, dtype=np.int64)
        self.cols = np.empty((p, cap), order="F")
        self.ncached = np.zeros(1, dtype=np.int64)

    def grow(self) -> None:
        p, cap = self.cols.shape
        new = np.empty((p, min(p, 2 * cap)), order="F")
        new[:, :cap] = self.cols
        self.cols = new

    def gradient(self, beta: np.ndarray) -> np.ndarray:
        """``X'(Y - X beta)/n`` from cached columns (fills missing ones)."""
        g = self.xty.copy()
        A = np.flatnonzero(beta)
        if A.size:
            g -= self.columns(A) @ beta[A]
        return g

    @property
    def dense(self) -> bool:
        return int(self.ncached[0]) == self.dataset.p

    def columns(self, idx: np.ndarray) -> np.ndarray:
        if self.dense:
            return self.cols[:, idx]
        missing = idx[self.slot[idx] < 0]
        while self.ncached[0] + len(missing) > self.cols.shape[1]:
            self.grow()
        for j in missing:
            k = int(self.ncached[0])
            _gram_col(self.dataset.X, int(j), self.cols[:, k])
            self.slot[j] = k
            self.ncached[0] += 1
        return self.cols[:, self.slot[idx]]


def _kkt(grad, beta, pen, col_sq):
    kappa = grad / pen
    kappa[col_sq == 0.0] = 0.0
    s = np.sign(beta)
    on = s != 0
    viol = np.where(on, np.abs(kappa - s), np.abs(kappa) - 1.0)
    return kappa, float(max(viol.max(initial=0.0), 0.0))


def _polish(cache: GramCache, beta, pen, current_violation):
    """Solve the active-set stationarity equations exactly.

    With support A and signs s fixed, ``G_AA b_A = X_A'y/n - pen_A * s`` is
    linear. The solution is accepted when it keeps the signs and does not
    worsen the KKT violation; this removes the residual coordinate-descent
    error on the support.
    """
    from scipy.linalg import LinAlgError, cho_factor, cho_solve

    A = np.flatnonzero(beta)
    if A.size == 0 or A.size >= cache.dataset.n:
        return None
    s = np.sign(beta[A])
    C = cache.columns(A)
    G = C[A]
    rhs = cache.xty[A] - pen[A] * s
    try:
        bA = cho_solve(cho_factor(G, lower=True, check_finite=False), rhs, check_finite=False)
    except LinAlgError:
        return None
    if not np.all(np.isfinite(bA)) or np.any(np.sign(bA) != s):
        return None
    new = np.zeros_like(beta)
    new[A] = bA
    _, viol = _kkt(cache.xty - C @ bA, new, pen, cache.col_sq)
    if viol > max(current_violation, 1e-12):
        return None
    return new, viol


def fit_weighted_lasso(
    dataset: Dataset,
    lam: float,
    weights: np.ndarray | None = None,
    config=None,
    warm_start: np.ndarray | None = None,
    *,
    cache: GramCache | None = None,
    polish: bool | None = None,
    trace: bool = False,
    kkt_tolerance: float | None = None,
):
    """Fit the weighted Lasso at a single ``lam``.

    Parameters
    ----------
    dataset : Dataset
    lam : float
        Positive penalty level.
    weights : array of shape (p,), optional
        Penalty weights in (0, 1]; defaults to all ones (plain Lasso).
    config : TuningConfig, optional
        Supplies ``tolerance``, ``kkt_tolerance``, ``max_iterations`` and
        ``polish``.
    warm_start : array of shape (p,), optional
        Initial coefficients.
    cache : GramCache, optional
        Shared Gram-column cache for ``dataset``.
    polish : bool, optional
        Refine the support coefficients with an exact linear solve;
        defaults to ``config.polish``.
    trace : bool
        Also return the objective after every sweep (for monotonicity checks).
    kkt_tolerance : float, optional
        Overrides ``config.kkt_tolerance``.

    Returns
    -------
    LassoFit, or ``(LassoFit, objective_trace)`` when ``trace`` is true.
    Non-convergence is reported through ``converged=False`` and a
    ``RuntimeWarning``; it is not an exception.
    """
    from .core import TuningConfig

    config = config or TuningConfig()
    n, p = dataset.n, dataset.p
    if not lam > 0 or not np.isfinite(lam):
        raise InputError(f"lambda must be positive and finite, got {lam}")
    if weights is None:
        w = np.ones(p)
    else:
        w = np.array(weights, dtype=np.float64)
        if w.shape != (p,):
            raise InputError(f"weights must have shape ({p},), got {w.shape}")
        if np.any(~(w > 0)) or np.any(w > 1.0):
            raise InputError("weights must lie in (0, 1]")
    if cache is None:
        cache = GramCache(dataset)
    elif cache.dataset is not dataset:
        raise InputError("cache belongs to a different dataset")
    if warm_start is None:
        beta = np.zeros(p)
    else:
        beta = np.array(warm_start, dtype=np.float64)
        if beta.shape != (p,):
            raise InputError(f"warm_start must have shape ({p},)")
        beta[cache.col_sq == 0.0] = 0.0
    kkt_tol = config.kkt_tolerance if kkt_tolerance is None else kkt_tolerance
    polish = config.polish if polish is None else polish

    pen = lam * w
    g = cache.gradient(beta)
    buf = np.empty(config.max_iterations if trace else 0)
    sweeps, ntr, converged = 0, 0, False
    chunk = 8
    while sweeps < config.max_iterations:
        used, converged, k, full = _cd(
            dataset.X, g, beta, pen, cache.col_sq, cache.slot, cache.cols, cache.ncached,
            config.tolerance, kkt_tol, min(chunk, config.max_iterations - sweeps),
            buf[ntr:], cache.yy, cache.xty,
        )
        sweeps += used
        ntr += k
        if full:
            cache.grow()
            continue
        if converged:
            break
        # Slow tail: try the exact solve on the current support and signs.
        jumped = _polish(cache, beta, pen, kkt_tol)
        if jumped is not None:
            beta = jumped[0]
            converged = True
            if ntr < buf.shape[0]:
                buf[ntr] = objective(dataset, beta, lam, w)
                ntr += 1
            break
        chunk *= 2
    if not np.all(np.isfinite(beta)):
        raise NumericalError("NaN or inf encountered in coordinate descent")
    _, viol = _kkt(cache.gradient(beta), beta, pen, cache.col_sq)
    if polish:
        polished = _polish(cache, beta, pen, viol)
        if polished is not None:
            beta, viol = polished
    A = np.flatnonzero(beta)
    r = dataset.Y - dataset.X[:, A] @ beta[A]
    converged = bool(converged or viol <= kkt_tol)
    if not converged:
        warnings.warn(
            f"weighted Lasso at lambda={lam:.4g} did not converge in "
            f"{config.max_iterations} sweeps (KKT violation {viol:.2e})",
            RuntimeWarning,
            stacklevel=2,
        )
    beta.setflags(write=False)
    w.setflags(write=False)
    fit = LassoFit(
        beta=beta,
        lam=float(lam),
        weights=w,
        objective=float(r @ r / n + 2.0 * lam * np.sum(w * np.abs(beta))),
        iterations=int(sweeps),
        converged=converged,
        max_violation=viol,
    )
    if trace:
        return fit, buf[:ntr].copy()
    return fit


def kkt_check(dataset: Dataset, fit: LassoFit) -> KktCertificate:
    """Recompute the subgradient certificate of ``fit`` on ``dataset``.

    ``kappa`` equals ``sign(beta_j)`` on the active set and the raw
    normalised gradient elsewhere; ``max_violation`` measures the deviation
    of the raw gradient from those conditions.
    """
    if fit.beta.shape != (dataset.p,):
        raise InputError("fit dimension does not match dataset")
    if not fit.lam > 0:
        raise InputError("KKT certificate undefined for lambda = 0")
    X = dataset.X
    col_sq = np.einsum("ij,ij->j", X, X) / dataset.n
    r = dataset.Y - X @ fit.beta
    kappa, viol = _kkt(X.T @ r / dataset.n, fit.beta, fit.lam * fit.weights, col_sq)
    on = fit.beta != 0
    kappa[on] = np.sign(fit.beta[on])
    return KktCertificate(kappa=kappa, max_violation=viol)
