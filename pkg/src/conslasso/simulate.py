"""Monte Carlo designs and the replication harness.

Covariates have Toeplitz covariance ``rho^|i-j|`` built from t-distributed
innovations; errors are t-distributed and optionally heteroskedastic in the
first two covariates. Every replication draws from its own counter-based
Philox stream keyed by ``(seed, replication)`` so results do not depend on
how replications are scheduled across workers.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from typing import Sequence

import numpy as np
from joblib import Parallel, delayed
from threadpoolctl import threadpool_limits

from ._version import __version__
from .core import Dataset, TuningConfig
from .errors import ConsLassoError, InputError, NumericalError
from .inference import (
    chi2_test,
    confidence_intervals,
    desparsify,
    sandwich_covariance,
    studentized_statistic,
)
from .nodewise import build_theta_rows, nodewise_stage1
from .pipeline import fit_conservative
from .solver import GramCache
from .tuning import select_lasso

__all__ = [
    "DgpConfig",
    "ExperimentConfig",
    "MetricsTable",
    "EstimatorMetrics",
    "REProbe",
    "EXPERIMENTS",
    "toeplitz_sigma",
    "b_x",
    "sample_design",
    "sample_errors",
    "sample_dataset",
    "make_beta0",
    "named_experiment",
    "replication_rng",
    "run_replication",
    "run_experiment",
    "studentized_replication",
    "studentized_draws",
    "restricted_eigenvalue_probe",
    "re_perturbation_check",
]

ESTIMATORS = ("lasso", "classo")
H_TEST = (0, 1)
NULL_SIZE = (1.0, 0.0)
NULL_POWER = (1.0, 0.4)
MAX_FAILURE_RATE = 0.01


def toeplitz_sigma(p: int, rho: float) -> np.ndarray:
    """Covariance with entries ``rho^|i-j|``."""
    if not 0 <= rho < 1:
        raise InputError(f"rho must lie in [0, 1), got {rho}")
    if p < 1:
        raise InputError("p must be positive")
    k = np.arange(p)
    return rho ** np.abs(k[:, None] - k[None, :]).astype(float)


@lru_cache(maxsize=16)
def _toeplitz_factor(p: int, rho: float) -> np.ndarray:
    L = np.linalg.cholesky(toeplitz_sigma(p, rho))
    L.setflags(write=False)
    return L


def b_x(rho: float) -> float:
    """Loading on the second covariate that keeps ``Var(u) = Var(eps)``.

    Solves ``1/2 + b^2 + sqrt(2) b rho = 1`` for the positive root.
    """
    return (-math.sqrt(2) * rho + math.sqrt(2 * rho**2 + 2)) / 2


@dataclass(frozen=True)
class DgpConfig:
    """One simulation design.

    ``beta_pattern`` is ``"exp1"``, ``"exp2"``, ``"exp3"`` or ``"custom"``;
    the latter takes ``beta_values`` verbatim.
    """

    n: int
    p: int
    rho: float = 0.0
    beta_pattern: str = "exp1"
    beta_values: tuple[float, ...] | None = None
    dof: float = 10.0
    heteroskedastic: bool = False
    seed: int = 0
    standardize_t: bool = True

    def __post_init__(self) -> None:
        if self.n < 2 or self.p < 1:
            raise InputError("need n >= 2 and p >= 1")
        if not 0 <= self.rho < 1:
            raise InputError(f"rho must lie in [0, 1), got {self.rho}")
        if not self.dof > 0:
            raise InputError("dof must be positive")
        if self.standardize_t and not self.dof > 2:
            raise InputError("t variance is undefined for dof <= 2; cannot standardise")
        if self.heteroskedastic and self.p < 2:
            raise InputError("heteroskedastic errors need p >= 2")
        if self.beta_values is not None:
            object.__setattr__(self, "beta_values", tuple(float(v) for v in self.beta_values))
        make_beta0(self.beta_pattern, self.p, self.beta_values)

    @property
    def beta0(self) -> np.ndarray:
        return make_beta0(self.beta_pattern, self.p, self.beta_values)

    @property
    def b_x(self) -> float:
        return b_x(self.rho)

    @property
    def sigma(self) -> np.ndarray:
        return toeplitz_sigma(self.p, self.rho)


def make_beta0(pattern: str, p: int, values: Sequence[float] | None = None) -> np.ndarray:
    """True coefficients.

    ``exp1``/``exp3``: ten equidistant ones at 0-based indices ``0, p/10, 2p/10, ...``
    (so the first coefficient is one and the second zero). ``exp2``: leading
    ``(1, 0, 1, 0.1)`` followed by zeros.
    """
    if pattern in ("exp1", "exp3"):
        s0 = 10
        if p % s0 or p // s0 < 2:
            raise InputError(f"pattern {pattern} needs p a multiple of {s0} and p >= {2 * s0}")
        beta = np.zeros(p)
        beta[:: p // s0] = 1.0
        return beta
    if pattern == "exp2":
        if p < 4:
            raise InputError("pattern exp2 needs p >= 4")
        beta = np.zeros(p)
        beta[:4] = (1.0, 0.0, 1.0, 0.1)
        return beta
    if pattern == "custom":
        if values is None or len(values) != p:
            raise InputError(f"custom pattern needs exactly p={p} values")
        return np.array(values, dtype=float)
    raise InputError(f"unknown coefficient pattern {pattern!r}")


def _t_draws(dgp: DgpConfig, rng: np.random.Generator, shape) -> np.ndarray:
    z = rng.standard_t(dgp.dof, size=shape)
    if dgp.standardize_t:
        z /= math.sqrt(dgp.dof / (dgp.dof - 2))
    return z


def sample_design(dgp: DgpConfig, rng: np.random.Generator) -> np.ndarray:
    """``X = Z L'`` with iid t rows ``Z`` and ``L L' = Sigma``."""
    Z = _t_draws(dgp, rng, (dgp.n, dgp.p))
    if dgp.rho == 0:
        return Z
    return Z @ _toeplitz_factor(dgp.p, float(dgp.rho)).T


def sample_errors(dgp: DgpConfig, X: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """t errors, multiplied by ``X_1/sqrt(2) + b_x X_2`` when heteroskedastic."""
    eps = _t_draws(dgp, rng, X.shape[0])
    if not dgp.heteroskedastic:
        return eps
    if X.shape[1] < 2:
        raise InputError("heteroskedastic errors need p >= 2")
    return eps * (X[:, 0] / math.sqrt(2) + dgp.b_x * X[:, 1])


def sample_dataset(dgp: DgpConfig, rng: np.random.Generator) -> Dataset:
    X = sample_design(dgp, rng)
    u = sample_errors(dgp, X, rng)
    return Dataset(X, X @ dgp.beta0 + u)


def replication_rng(seed: int, replication: int) -> np.random.Generator:
    """Independent Philox stream for one replication."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(replication),))
    return np.random.Generator(np.random.Philox(ss))


# name -> (pattern, p, allowed n, allowed rho, heteroskedastic)
EXPERIMENTS: dict[str, tuple[str, int, tuple[int, ...], tuple[float, ...], bool]] = {
    "1a": ("exp1", 50, (100,), (0.0, 0.5, 0.9), False),
    "1b": ("exp1", 50, (100,), (0.0, 0.5, 0.9), True),
    "2a": ("exp2", 104, (100,), (0.0, 0.5, 0.9), False),
    "2b": ("exp2", 104, (100,), (0.0, 0.5, 0.9), True),
    "3a": ("exp3", 1000, (100, 150, 200, 500), (0.75,), False),
    "3b": ("exp3", 1000, (100, 150, 200, 500), (0.75,), True),
}


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    dgp: DgpConfig
    replications: int = 1000
    level: float = 0.95
    null_size: tuple[float, float] = NULL_SIZE
    null_power: tuple[float, float] = NULL_POWER
    tuning: TuningConfig = field(default_factory=TuningConfig)

    def __post_init__(self) -> None:
        if self.replications < 1:
            raise InputError("replications must be at least 1")
        if not 0 < self.level < 1:
            raise InputError("level must lie in (0, 1)")
        if self.dgp.p < 2:
            raise InputError("the two-coordinate tests need p >= 2")
        spec = EXPERIMENTS.get(self.name)
        if spec is None:
            if self.name != "custom":
                raise InputError(
                    f"unknown experiment {self.name!r}; expected one of "
                    f"{sorted(EXPERIMENTS)} or 'custom'"
                )
            return
        pattern, p, ns, rhos, het = spec
        d = self.dgp
        if (d.beta_pattern, d.p, d.heteroskedastic) != (pattern, p, het):
            raise InputError(f"experiment {self.name} requires pattern {pattern}, p={p}")
        if d.n not in ns:
            raise InputError(f"experiment {self.name} is defined for n in {ns}, got {d.n}")
        if d.rho not in rhos:
            raise InputError(f"experiment {self.name} is defined for rho in {rhos}, got {d.rho}")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["tuning"] = self.tuning.to_dict()
        out["null_size"] = list(self.null_size)
        out["null_power"] = list(self.null_power)
        return out


def named_experiment(
    name: str,
    *,
    rho: float | None = None,
    n: int | None = None,
    replications: int = 1000,
    seed: int = 0,
    level: float = 0.95,
    tuning: TuningConfig | None = None,
    standardize_t: bool = True,
) -> ExperimentConfig:
    """Config for one of ``1a, 1b, 2a, 2b, 3a, 3b`` (first listed n and rho by default)."""
    if name not in EXPERIMENTS:
        raise InputError(f"unknown experiment {name!r}; expected one of {sorted(EXPERIMENTS)}")
    pattern, p, ns, rhos, het = EXPERIMENTS[name]
    dgp = DgpConfig(
        n=ns[0] if n is None else int(n),
        p=p,
        rho=rhos[0] if rho is None else float(rho),
        beta_pattern=pattern,
        heteroskedastic=het,
        seed=seed,
        standardize_t=standardize_t,
    )
    return ExperimentConfig(
        name=name, dgp=dgp, replications=replications, level=level,
        tuning=tuning or TuningConfig(),
    )


def run_replication(config: ExperimentConfig, replication: int) -> dict:
    """Raw metrics of one replication for both estimators.

    Returns ``{"replication": r, "lasso": {...}, "classo": {...}}`` or, when
    a numerical step fails, ``{"replication": r, "error": message}``.
    """
    rng = replication_rng(config.dgp.seed, replication)
    ds = sample_dataset(config.dgp, rng)
    beta0 = config.dgp.beta0
    tuning = config.tuning
    try:
        with threadpool_limits(limits=1):
            cache = GramCache(ds)
            stage1 = select_lasso(ds, tuning, cache=cache)
            cfit = fit_conservative(ds, tuning, stage1=stage1, cache=cache)
            node1 = nodewise_stage1(ds, H_TEST, tuning)
            out = {"replication": replication}
            for name, beta, method in (
                ("lasso", stage1[0].beta, "lasso"),
                ("classo", cfit.beta, "conservative"),
            ):
                theta = build_theta_rows(ds, H_TEST, tuning, method, stage1=node1)
                b = desparsify(ds, beta, theta)
                M = sandwich_covariance(ds, beta, theta)
                ci = confidence_intervals(b, M, ds.n, 1 - config.level)
                size = chi2_test(b, config.null_size, M, ds.n)
                power = chi2_test(b, config.null_power, M, ds.n)
                alpha = 1 - config.level
                truth = beta0[list(H_TEST)]
                out[name] = {
                    "l2": float(np.linalg.norm(beta - beta0)),
                    "size": float(size.pvalue < alpha),
                    "power": float(power.pvalue < alpha),
                    "cover_nonzero": float(ci[0, 0] <= truth[0] <= ci[0, 1]),
                    "cover_zero": float(ci[1, 0] <= truth[1] <= ci[1, 1]),
                    "length_nonzero": float(ci[0, 1] - ci[0, 0]),
                    "length_zero": float(ci[1, 1] - ci[1, 0]),
                    "stat_first": float((b[0] - truth[0]) * math.sqrt(ds.n) / M.sigma_hat[0]),
                }
            return out
    except (ConsLassoError, np.linalg.LinAlgError) as exc:
        return {"replication": replication, "error": f"{type(exc).__name__}: {exc}"}


def studentized_replication(config: ExperimentConfig, replication: int, j: int = 0) -> float:
    """Studentized conservative statistic for coordinate ``j`` under the truth.

    Uses only ``H = {j}``, so it is cheaper than a full replication. Returns
    NaN when a numerical step fails.
    """
    rng = replication_rng(config.dgp.seed, replication)
    ds = sample_dataset(config.dgp, rng)
    try:
        with threadpool_limits(limits=1):
            cfit = fit_conservative(ds, config.tuning)
            theta = build_theta_rows(ds, (j,), config.tuning, "conservative")
            b = desparsify(ds, cfit.beta, theta)
            M = sandwich_covariance(ds, cfit.beta, theta)
            return float(
                studentized_statistic(np.ones(1), b, config.dgp.beta0[[j]], M, ds.n)
            )
    except (ConsLassoError, np.linalg.LinAlgError):
        return math.nan


def studentized_draws(config: ExperimentConfig, n_jobs: int = 1, j: int = 0) -> np.ndarray:
    """``studentized_replication`` for every replication, in replication order."""
    reps = range(config.replications)
    if n_jobs == 1:
        return np.array([studentized_replication(config, r, j) for r in reps])
    return np.array(
        Parallel(n_jobs=n_jobs)(delayed(studentized_replication)(config, r, j) for r in reps)
    )


METRICS = (
    "l2", "size", "power", "cover_nonzero", "cover_zero", "length_nonzero", "length_zero",
)
RATES = ("size", "power", "cover_nonzero", "cover_zero")


@dataclass(frozen=True)
class EstimatorMetrics:
    """Means over replications and their Monte Carlo standard errors."""

    estimator: str
    means: dict
    std_errors: dict
    replications: int

    def to_dict(self) -> dict:
        return {
            "estimator": self.estimator,
            "replications": self.replications,
            **{k: self.means[k] for k in METRICS},
            **{f"{k}_se": self.std_errors[k] for k in METRICS},
        }


@dataclass(frozen=True, eq=False)
class MetricsTable:
    rows: tuple[EstimatorMetrics, ...]
    failures: int
    failure_messages: tuple[str, ...]
    metadata: dict
    raw: tuple[dict, ...] = field(repr=False, default=())

    def row(self, estimator: str) -> EstimatorMetrics:
        for r in self.rows:
            if r.estimator == estimator:
                return r
        raise KeyError(estimator)

    def statistics(self, estimator: str = "classo", key: str = "stat_first") -> np.ndarray:
        """Per-replication raw values (successful replications only)."""
        return np.array([r[estimator][key] for r in self.raw if "error" not in r])

    def to_dict(self) -> dict:
        return {
            "metadata": self.metadata,
            "failures": self.failures,
            "failure_messages": list(self.failure_messages),
            "rows": [r.to_dict() for r in self.rows],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["estimator", "replications", *METRICS, *(f"{k}_se" for k in METRICS)]
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            d = r.to_dict()
            w.writerow({k: (f"{d[k]:.6f}" if isinstance(d[k], float) else d[k]) for k in cols})
        return buf.getvalue()

    def format(self) -> str:
        """Plain-text table in the usual column order."""
        m = self.metadata
        head = (
            f"Experiment {m['experiment']}  n={m['n']} p={m['p']} rho={m['rho']}  "
            f"replications={m['replications_ok']}/{m['replications']}"
        )
        cols = (
            f"{'':8}{'l2':>8}{'size':>8}{'power':>8}{'cov nz':>8}{'cov z':>8}"
            f"{'len nz':>8}{'len z':>8}"
        )
        lines = [head, cols]
        names = {"lasso": "Lasso", "classo": "CLasso"}
        for r in self.rows:
            vals = "".join(f"{r.means[k]:8.3f}" for k in METRICS)
            ses = "".join(f"{'(' + format(r.std_errors[k], '.3f') + ')':>8}" for k in METRICS)
            lines.append(f"{names.get(r.estimator, r.estimator):8}{vals}")
            lines.append(f"{'':8}{ses}")
        return "\n".join(lines)


def _aggregate(results: list[dict]) -> tuple[EstimatorMetrics, ...]:
    ok = [r for r in results if "error" not in r]
    R = len(ok)
    rows = []
    for est in ESTIMATORS:
        means, ses = {}, {}
        for k in METRICS:
            v = np.array([r[est][k] for r in ok], dtype=float)
            m = float(v.mean()) if R else math.nan
            if k in RATES:
                se = math.sqrt(m * (1 - m) / R) if R else math.nan
            else:
                se = float(v.std(ddof=1) / math.sqrt(R)) if R > 1 else 0.0
            means[k], ses[k] = m, se
        rows.append(EstimatorMetrics(est, means, ses, R))
    return tuple(rows)


def run_experiment(
    config: ExperimentConfig, n_jobs: int = 1, *, keep_raw: bool = True
) -> MetricsTable:
    """All replications, reduced in replication order.

    Failed replications are excluded and counted; more than 1% failures
    raise ``NumericalError``.
    """
    if n_jobs < 1:
        raise InputError("n_jobs must be at least 1")
    reps = range(config.replications)
    if n_jobs == 1:
        results = [run_replication(config, r) for r in reps]
    else:
        results = Parallel(n_jobs=n_jobs, batch_size=1)(
            delayed(run_replication)(config, r) for r in reps
        )
    results = sorted(results, key=lambda r: r["replication"])
    failed = [r for r in results if "error" in r]
    if len(failed) > MAX_FAILURE_RATE * config.replications:
        raise NumericalError(
            f"{len(failed)} of {config.replications} replications failed "
            f"(first: {failed[0]['error']})"
        )
    d = config.dgp
    metadata = {
        "experiment": config.name,
        "n": d.n,
        "p": d.p,
        "rho": d.rho,
        "heteroskedastic": d.heteroskedastic,
        "beta_pattern": d.beta_pattern,
        "dof": d.dof,
        "standardize_t": d.standardize_t,
        "seed": d.seed,
        "replications": config.replications,
        "replications_ok": config.replications - len(failed),
        "level": config.level,
        "null_size": list(config.null_size),
        "null_power": list(config.null_power),
        "tuning": config.tuning.to_dict(),
        "version": __version__,
    }
    return MetricsTable(
        rows=_aggregate(results),
        failures=len(failed),
        failure_messages=tuple(f"replication {r['replication']}: {r['error']}" for r in failed),
        metadata=metadata,
        raw=tuple(results) if keep_raw else (),
    )


@dataclass(frozen=True)
class REProbe:
    """Smallest ratio found; an upper bound on the restricted eigenvalue."""

    value: float
    direction: np.ndarray
    samples: int
    approximate: bool = True


def _re_ratio(sigma, S, Sc, d) -> float:
    den = float(d[S] @ d[S])
    return float(d @ sigma @ d) / den


def _into_cone(d, S, Sc, c) -> np.ndarray:
    budget = c * np.linalg.norm(d[S])
    l1 = np.abs(d[Sc]).sum()
    if l1 > budget:
        d = d.copy()
        d[Sc] *= budget / l1
    return d


def restricted_eigenvalue_probe(
    sigma: np.ndarray,
    S: Sequence[int],
    samples: int = 2000,
    rng: np.random.Generator | int | None = 0,
    refine_steps: int = 400,
) -> REProbe:
    """Random search for ``min d'Sigma d / ||d_S||^2`` over the cone
    ``||d_{S^c}||_1 <= 3 sqrt(s) ||d_S||_2``.

    Random cone points are followed by a shrinking-step local search from the
    best few. The minimum over evaluated points can only overestimate the
    true value.
    """
    sigma = np.asarray(sigma, dtype=float)
    p = sigma.shape[0]
    S = np.unique(np.asarray(S, dtype=int))
    if S.size == 0:
        raise InputError("support S must be non-empty")
    if p > 50:
        raise InputError("the probe is a diagnostic for p <= 50")
    if S.min() < 0 or S.max() >= p:
        raise InputError("support index out of range")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    Sc = np.setdiff1d(np.arange(p), S)
    c = 3 * math.sqrt(S.size)

    cands = []
    for _ in range(samples):
        d = np.zeros(p)
        d[S] = rng.standard_normal(S.size)
        d[S] /= np.linalg.norm(d[S])
        if Sc.size:
            v = rng.standard_normal(Sc.size) * rng.exponential(size=Sc.size)
            d[Sc] = v / np.abs(v).sum() * c * rng.uniform() ** 0.5
        cands.append((_re_ratio(sigma, S, Sc, d), d))
    cands.sort(key=lambda t: t[0])
    best_val, best = cands[0]
    for val, d in cands[:5]:
        step = 0.5
        for _ in range(refine_steps):
            trial = _into_cone(d + step * rng.standard_normal(p), S, Sc, c)
            if not np.any(trial[S]):
                continue
            tv = _re_ratio(sigma, S, Sc, trial)
            if tv < val:
                val, d = tv, trial / np.linalg.norm(trial[S])
            else:
                step *= 0.97
        if val < best_val:
            best_val, best = val, d
    return REProbe(float(best_val), best, samples)


@dataclass(frozen=True)
class REPerturbation:
    probe_reference: float
    probe_perturbed: float
    sup_distance: float
    implied_lower: float
    holds: bool


def re_perturbation_check(
    sigma_hat: np.ndarray,
    sigma: np.ndarray,
    S: Sequence[int],
    samples: int = 2000,
    rng: int = 0,
    slack: float = 1e-3,
) -> REPerturbation:
    """Check ``phi(Sigma_hat) >= phi(Sigma) - 16 s ||Sigma_hat - Sigma||_inf``."""
    s = len(set(int(j) for j in S))
    delta = float(np.abs(np.asarray(sigma_hat) - np.asarray(sigma)).max())
    a = restricted_eigenvalue_probe(sigma, S, samples, rng).value
    b = restricted_eigenvalue_probe(sigma_hat, S, samples, rng).value
    lower = a - 16 * s * delta
    return REPerturbation(a, b, delta, lower, b >= lower - slack)


def with_replications(config: ExperimentConfig, replications: int) -> ExperimentConfig:
    return replace(config, replications=replications)
