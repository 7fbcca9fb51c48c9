import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from conslasso.core import Dataset  # noqa: E402


def make_dataset(n, p, seed=0, s0=3, noise=1.0, rho=0.0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p))
    if rho:
        k = np.arange(p)
        L = np.linalg.cholesky(rho ** np.abs(k[:, None] - k[None, :]))
        X = X @ L.T
    beta = np.zeros(p)
    beta[: min(s0, p)] = rng.choice([-1.5, -1.0, 1.0, 2.0], size=min(s0, p))
    y = X @ beta + noise * rng.standard_normal(n)
    return Dataset(X, y), beta


@pytest.fixture
def small():
    return make_dataset(60, 12, seed=1)


@pytest.fixture
def wide():
    return make_dataset(50, 80, seed=2)


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def report(criterion: int, ok: bool, detail: str) -> None:
    """Record one acceptance line; the summary hook prints them all."""
    ACCEPTANCE[criterion] = (bool(ok), detail)
    print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
