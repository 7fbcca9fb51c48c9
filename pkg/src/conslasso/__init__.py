"""Desparsified conservative Lasso: weighted-l1 estimation and robust inference
for high-dimensional linear models."""

from ._version import __version__
from .core import Dataset, HypothesisSpec, TuningConfig, read_csv
from .errors import (
    ConsLassoError,
    ConvergenceError,
    InputError,
    NumericalError,
    SingularityError,
)
from .inference import (
    InferenceReport,
    chi2_test,
    confidence_intervals,
    desparsify,
    infer,
    sandwich_covariance,
    studentized_statistic,
)
from .nodewise import ThetaRows, build_theta_rows, fit_nodewise, select_lambda_node
from .pipeline import ConservativeFit, conservative_weights, fit_conservative
from .simulate import ExperimentConfig, MetricsTable, named_experiment, run_experiment
from .solver import LassoFit, fit_weighted_lasso, kkt_check
from .tuning import select_conservative, select_lasso

__all__ = [
    "__version__",
    "Dataset",
    "HypothesisSpec",
    "TuningConfig",
    "read_csv",
    "ConsLassoError",
    "ConvergenceError",
    "InputError",
    "NumericalError",
    "SingularityError",
    "InferenceReport",
    "chi2_test",
    "confidence_intervals",
    "desparsify",
    "infer",
    "sandwich_covariance",
    "studentized_statistic",
    "ThetaRows",
    "build_theta_rows",
    "fit_nodewise",
    "select_lambda_node",
    "ConservativeFit",
    "conservative_weights",
    "fit_conservative",
    "ExperimentConfig",
    "MetricsTable",
    "named_experiment",
    "run_experiment",
    "LassoFit",
    "fit_weighted_lasso",
    "kkt_check",
    "select_conservative",
    "select_lasso",
]
