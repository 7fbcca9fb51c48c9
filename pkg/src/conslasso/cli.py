"""Command-line interface: ``conslasso {fit,infer,nodewise,simulate}``.

Every JSON file written here has a ``payload`` block, which depends only on
the inputs, and a ``meta`` block with timestamps and host details.
Coordinates are 1-based on the command line and in all outputs.

Exit codes: 0 success, 2 input error, 3 numerical or convergence failure.
"""

from __future__ import annotations

import argparse
import json
import os
import platform
import sys
import time
import warnings
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from ._version import __version__
from .core import Dataset, TuningConfig, center, column_standardize, read_csv
from .errors import InputError, NumericalError
from .inference import InferenceReport, infer
from .nodewise import build_theta_rows
from .pipeline import fit_conservative
from .simulate import EXPERIMENTS, DgpConfig, ExperimentConfig, run_experiment

CONFIG_ENV = "CONSLASSO_CONFIG"
EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


def _meta(started: float) -> dict:
    return {
        "version": __version__,
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "elapsed_seconds": round(time.time() - started, 3),
        "host": platform.node(),
        "python": platform.python_version(),
    }


def _write_json(path: str | None, payload: dict, started: float) -> None:
    text = json.dumps({"payload": payload, "meta": _meta(started)}, indent=2, sort_keys=True)
    if path is None:
        print(text)
    else:
        Path(path).write_text(text + "\n", encoding="utf-8")


def _load_json(path: str | Path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: line {exc.lineno}: invalid JSON ({exc.msg})") from None


def _config_path(args) -> str | None:
    return args.config or os.environ.get(CONFIG_ENV) or None


def _tuning(args) -> TuningConfig:
    path = _config_path(args)
    if path is None:
        return TuningConfig()
    data = _load_json(path)
    # a tuning block inside an experiment config is accepted as well
    data = data.get("tuning", data) if isinstance(data, dict) else data
    if not isinstance(data, dict):
        raise InputError(f"{path}: tuning config must be a JSON object")
    return TuningConfig.from_mapping(data)


def _coords(text: str, p: int) -> tuple[int, ...]:
    try:
        idx = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise InputError(f"coordinates must be comma-separated integers, got {text!r}") from None
    if not idx:
        raise InputError("no coordinates given")
    for j in idx:
        if not 1 <= j <= p:
            raise InputError(f"coordinate {j} out of range 1..{p}")
    if len(set(idx)) != len(idx):
        raise InputError("coordinates must be distinct")
    return tuple(j - 1 for j in idx)


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in text.split(","))
    except ValueError:
        raise InputError(f"expected comma-separated numbers, got {text!r}") from None


def prepare(ds: Dataset, standardize: bool, centered: bool):
    """Apply the preprocessing used by ``fit``; returns (dataset, scales, x_mean, y_mean)."""
    x_mean = np.zeros(ds.p)
    y_mean = 0.0
    if centered:
        ds, x_mean, y_mean = center(ds)
    ds, scales = column_standardize(ds, standardize)
    return ds, scales, x_mean, y_mean


def _apply(ds: Dataset, art: dict) -> Dataset:
    """Transform new data with the centring and scales stored in a fit artifact."""
    X = (ds.X - np.asarray(art["x_mean"])) / np.asarray(art["scales"])
    return Dataset(X, ds.Y - art["y_mean"], ds.column_names)


def fit_payload(ds: Dataset, tuning: TuningConfig, standardize=True, centered=False) -> dict:
    work, scales, x_mean, y_mean = prepare(ds, standardize, centered)
    cf = fit_conservative(work, tuning)
    coef = cf.beta / scales
    intercept = float(y_mean - x_mean @ coef)

    def stage(fit):
        return {
            "beta": fit.beta.tolist(),
            "lambda": fit.lam,
            "iterations": fit.iterations,
            "converged": fit.converged,
            "kkt_max_violation": fit.max_violation,
        }

    return {
        "n": ds.n,
        "p": ds.p,
        "columns": list(ds.column_names) if ds.column_names else None,
        "standardize": bool(standardize),
        "center": bool(centered),
        "scales": scales.tolist(),
        "x_mean": np.asarray(x_mean).tolist(),
        "y_mean": float(y_mean),
        "stage1": stage(cf.stage1),
        "stage2": stage(cf.stage2),
        "weights": cf.weights.tolist(),
        "lambda_prec": cf.lambda_prec,
        "coefficients": coef.tolist(),
        "intercept": intercept,
        "tuning": tuning.to_dict(),
    }


def load_artifact(path: str | Path) -> dict:
    data = _load_json(path)
    art = data.get("payload", data) if isinstance(data, dict) else None
    need = {"p", "scales", "x_mean", "y_mean", "stage1", "stage2", "coefficients", "intercept"}
    if not isinstance(art, dict) or not need <= set(art):
        raise InputError(f"{path}: not a fit artifact")
    return art


def predict(art: dict, X: np.ndarray) -> np.ndarray:
    return art["intercept"] + np.asarray(X, dtype=float) @ np.asarray(art["coefficients"])


def _rescale(report: InferenceReport, scales: np.ndarray) -> dict:
    """Report on the original covariate scale (the chi-square test is scale-free)."""
    out = report.to_dict()
    s = scales[list(report.H)]
    out["b_hat"] = (report.b_hat / s).tolist()
    out["sigma_hat"] = (report.sigma_hat / s).tolist()
    out["intervals"] = (report.intervals / s[:, None]).tolist()
    if "null" in out:
        out["null"] = (np.asarray(report.null_values) / s).tolist()
    return out


def infer_payload(
    ds: Dataset, art: dict, H, tuning: TuningConfig, level=0.95, null=None,
    method="conservative",
) -> dict:
    if art["p"] != ds.p:
        raise InputError(f"fit artifact has p={art['p']} but the data have p={ds.p}")
    if art.get("columns") and ds.column_names and list(ds.column_names) != art["columns"]:
        raise InputError("column names of the data differ from those of the fit artifact")
    work = _apply(ds, art)
    scales = np.asarray(art["scales"])
    beta = np.asarray(art["stage2" if method == "conservative" else "stage1"]["beta"])
    null_std = None
    if null is not None:
        if len(null) != len(H):
            raise InputError(f"--null needs {len(H)} values, got {len(null)}")
        null_std = np.asarray(null) * scales[list(H)]
    rep = infer(work, beta, H, tuning, null_values=null_std, delta=1 - level, method=method)
    out = _rescale(rep, scales)
    out["method"] = method
    out["lambda_node"] = rep.theta.lambda_node
    # tuned separately from the main fit's lambda_prec, which the artifact records
    out["lambda_prec_node"] = rep.theta.lambda_prec
    out["lambda_prec"] = art.get("lambda_prec")
    return out


def nodewise_payload(ds: Dataset, H, tuning: TuningConfig, method="conservative") -> dict:
    theta = build_theta_rows(ds, H, tuning, method)
    diag, off = theta.identity_errors(ds)
    return {
        "H": [j + 1 for j in theta.H],
        "method": method,
        "lambda_node": theta.lambda_node,
        "lambda_prec": theta.lambda_prec,
        "rows": [
            {
                "j": f.j + 1,
                "tau_sq": f.tau_sq,
                "support_size": f.support_size,
                "diag_error": float(diag[i]),
                "offdiag_max": float(off[i]),
                "offdiag_bound": float(theta.offdiag_bounds()[i]),
                "kkt_max_violation": f.kkt_stage2,
            }
            for i, f in enumerate(theta.fits)
        ],
    }


def experiment_from_args(args) -> ExperimentConfig:
    path = _config_path(args)
    data = _load_json(path) if path else {}
    if not isinstance(data, dict):
        raise InputError("experiment config must be a JSON object")
    known = {
        "experiment", "n", "p", "rho", "replications", "seed", "heteroskedastic", "level",
        "tuning", "standardize_t", "dof", "beta_pattern", "beta_values",
    }
    unknown = set(data) - known
    if unknown:
        raise InputError(f"unknown experiment keys: {sorted(unknown)}")
    for key in ("experiment", "n", "rho", "seed", "level"):
        v = getattr(args, key, None)
        if v is not None:
            data[key] = v
    if args.reps is not None:
        data["replications"] = args.reps
    if args.raw_t:
        data["standardize_t"] = False
    name = data.get("experiment")
    if name is None:
        raise InputError("no experiment given (use --experiment or a config file)")
    name = str(name)
    if name in EXPERIMENTS:
        pattern, p, ns, rhos, het = EXPERIMENTS[name]
        defaults = {"n": ns[0], "p": p, "rho": rhos[0], "beta_pattern": pattern,
                    "heteroskedastic": het}
    elif name == "custom":
        defaults = {}
    else:
        raise InputError(f"unknown experiment {name!r}; expected one of {sorted(EXPERIMENTS)}")
    d = {**defaults, **{k: data[k] for k in data if k in (
        "n", "p", "rho", "heteroskedastic", "beta_pattern", "beta_values", "dof",
        "standardize_t", "seed")}}
    try:
        dgp = DgpConfig(**d)
    except TypeError as exc:
        raise InputError(f"incomplete experiment config: {exc}") from None
    tuning = TuningConfig.from_mapping(data.get("tuning", {}))
    return ExperimentConfig(
        name=name,
        dgp=dgp,
        replications=int(data.get("replications", 1000)),
        level=float(data.get("level", 0.95)),
        tuning=tuning,
    )


def cmd_fit(args) -> int:
    started = time.time()
    ds = read_csv(args.data)
    payload = fit_payload(ds, _tuning(args), not args.no_standardize, args.center)
    _write_json(args.out, payload, started)
    return EXIT_OK


def cmd_infer(args) -> int:
    started = time.time()
    ds = read_csv(args.data)
    art = load_artifact(args.fit)
    if args.all:
        H = tuple(range(ds.p))
        if ds.p > 50:
            warnings.warn(f"--all runs {ds.p} nodewise regressions; this may be slow", stacklevel=1)
    else:
        H = _coords(args.coords, ds.p)
    null = _floats(args.null) if args.null is not None else None
    if null is not None and len(null) != len(H):
        raise InputError(f"--null needs {len(H)} values, got {len(null)}")
    payload = infer_payload(ds, art, H, _tuning(args), args.level, null, args.method)
    _write_json(args.out, payload, started)
    return EXIT_OK


def cmd_nodewise(args) -> int:
    started = time.time()
    ds = read_csv(args.data)
    art_std = not args.no_standardize
    work, *_ = prepare(ds, art_std, args.center)
    payload = nodewise_payload(work, _coords(args.coords, ds.p), _tuning(args), args.method)
    _write_json(args.out, payload, started)
    return EXIT_OK


def cmd_simulate(args) -> int:
    started = time.time()
    config = experiment_from_args(args)
    table = run_experiment(config, n_jobs=args.threads, keep_raw=False)
    print(table.format())
    if table.failures:
        print(f"{table.failures} replication(s) failed and were excluded", file=sys.stderr)
    if args.out:
        if args.out.endswith(".json"):
            _write_json(args.out, table.to_dict(), started)
        else:
            Path(args.out).write_text(table.to_csv(), encoding="utf-8")
    if args.json:
        _write_json(args.json, table.to_dict(), started)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="conslasso", description="Conservative Lasso estimation and inference."
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        if data:
            p.add_argument("data", help="CSV file: header 'y,x1,...', one row per observation")
        p.add_argument(
            "--config", help=f"JSON config file (default: ${CONFIG_ENV} if set)"
        )
        p.add_argument("--out", help="output file (default: stdout)")

    p = sub.add_parser("fit", help="fit the conservative Lasso")
    common(p)
    p.add_argument("--no-standardize", action="store_true", help="do not rescale columns")
    p.add_argument("--center", action="store_true", help="centre X and y (adds an intercept)")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("infer", help="confidence intervals and a chi-square test")
    common(p)
    p.add_argument("--fit", required=True, help="fit artifact written by 'conslasso fit'")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--coords", help="1-based coordinates, e.g. 1,2")
    g.add_argument("--all", action="store_true", help="every coordinate")
    p.add_argument("--level", type=float, default=0.95, help="confidence level")
    p.add_argument("--null", help="null values for the chi-square test, e.g. 1,0")
    p.add_argument("--method", choices=("conservative", "lasso"), default="conservative")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("nodewise", help="nodewise-regression diagnostics")
    common(p)
    p.add_argument("--coords", required=True, help="1-based coordinates, e.g. 1,2")
    p.add_argument("--method", choices=("conservative", "lasso"), default="conservative")
    p.add_argument("--no-standardize", action="store_true")
    p.add_argument("--center", action="store_true")
    p.set_defaults(func=cmd_nodewise)

    p = sub.add_parser("simulate", help="run a Monte Carlo experiment")
    common(p, data=False)
    p.add_argument("--experiment", help=f"one of {', '.join(EXPERIMENTS)} or 'custom'")
    p.add_argument("--rho", type=float)
    p.add_argument("--n", type=int)
    p.add_argument("--reps", type=int, help="number of replications")
    p.add_argument("--seed", type=int)
    p.add_argument("--level", type=float)
    p.add_argument("--threads", type=int, default=1, help="worker processes")
    p.add_argument("--raw-t", action="store_true", help="do not rescale t draws to unit variance")
    p.add_argument("--json", help="also write the table as JSON")
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "level", None) is not None and not 0 < args.level < 1:
        parser.error("--level must lie in (0, 1)")
    if getattr(args, "threads", 1) < 1:
        parser.error("--threads must be at least 1")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
