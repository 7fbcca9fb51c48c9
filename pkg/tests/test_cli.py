import json
import subprocess
import sys

import numpy as np
import pytest
from conftest import make_dataset

from conslasso.cli import load_artifact, main, predict
from conslasso.core import write_csv
from conslasso.inference import infer
from conslasso.pipeline import fit_conservative


@pytest.fixture
def data(tmp_path):
    ds, _ = make_dataset(60, 8, seed=3)
    path = tmp_path / "d.csv"
    write_csv(path, ds)
    return ds, path


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def payload(path):
    return json.loads(path.read_text())["payload"]


def test_fit_writes_artifact(data, tmp_path, capsys):
    ds, path = data
    out = tmp_path / "fit.json"
    code, _, _ = run(["fit", path, "--out", out], capsys)
    assert code == 0
    art = payload(out)
    assert art["p"] == ds.p and art["stage2"]["converged"]
    assert len(art["coefficients"]) == ds.p
    assert art["stage2"]["kkt_max_violation"] <= 1e-5


@pytest.mark.parametrize("flags", [[], ["--center"], ["--no-standardize"]])
def test_predictions_round_trip(data, tmp_path, capsys, flags):
    ds, path = data
    out = tmp_path / "fit.json"
    assert run(["fit", path, "--out", out, *flags], capsys)[0] == 0
    art = load_artifact(out)
    # predictions on the original scale match the fit on the working scale
    from conslasso.cli import _apply

    work = _apply(ds, art)
    expect = work.X @ np.asarray(art["stage2"]["beta"]) + art["y_mean"]
    np.testing.assert_allclose(predict(art, ds.X), expect, atol=1e-10)


def test_unstandardized_fit_matches_library(data, tmp_path, capsys):
    ds, path = data
    out = tmp_path / "fit.json"
    run(["fit", path, "--out", out, "--no-standardize"], capsys)
    cf = fit_conservative(ds)
    np.testing.assert_allclose(payload(out)["coefficients"], cf.beta, atol=1e-12)


def test_infer_matches_library(data, tmp_path, capsys):
    ds, path = data
    fit = tmp_path / "fit.json"
    res = tmp_path / "inf.json"
    run(["fit", path, "--out", fit, "--no-standardize"], capsys)
    code, _, _ = run(
        ["infer", path, "--fit", fit, "--coords", "1,2", "--null", "0,0", "--out", res], capsys
    )
    assert code == 0
    got = payload(res)
    rep = infer(ds, fit_conservative(ds), [0, 1], null_values=[0, 0])
    assert got["H"] == [1, 2]
    assert got["lambda_prec_node"] == rep.theta.lambda_prec
    assert got["lambda_prec"] == payload(fit)["lambda_prec"]
    np.testing.assert_allclose(got["b_hat"], rep.b_hat, atol=1e-12)
    np.testing.assert_allclose(got["intervals"], rep.intervals, atol=1e-12)
    assert got["chi2"]["pvalue"] == pytest.approx(rep.chi2.pvalue, rel=1e-10)


def test_infer_level_on_original_scale(data, tmp_path, capsys):
    ds, path = data
    fit = tmp_path / "fit.json"
    run(["fit", path, "--out", fit], capsys)
    code, out, _ = run(["infer", path, "--fit", fit, "--coords", "3", "--level", "0.9"], capsys)
    assert code == 0
    rep = json.loads(out)["payload"]
    lo, hi = rep["intervals"][0]
    assert lo < rep["b_hat"][0] < hi and rep["level"] == pytest.approx(0.9)


def test_nodewise_diagnostics(data, capsys):
    _, path = data
    code, out, _ = run(["nodewise", path, "--coords", "1,4"], capsys)
    assert code == 0
    rows = json.loads(out)["payload"]["rows"]
    assert [r["j"] for r in rows] == [1, 4]
    assert all(r["diag_error"] <= 1e-10 for r in rows)


@pytest.mark.parametrize(
    "argv",
    [
        ["infer", "{data}", "--fit", "{fit}", "--coords", "9"],
        ["infer", "{data}", "--fit", "{fit}", "--coords", "1,2", "--null", "1"],
        ["infer", "{data}", "--fit", "{fit}", "--coords", "a"],
        ["infer", "{data}", "--fit", "{data}", "--coords", "1"],
        ["simulate", "--experiment", "9z"],
        ["simulate", "--experiment", "1a", "--rho", "0.3"],
    ],
)
def test_input_errors_exit_2(data, tmp_path, capsys, argv):
    _, path = data
    fit = tmp_path / "fit.json"
    run(["fit", path, "--out", fit], capsys)
    argv = [a.format(data=path, fit=fit) for a in argv]
    code, _, err = run(argv, capsys)
    assert code == 2
    assert err.startswith("error:")


def test_non_numeric_csv_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("y,x1\n1.0,2.0\n2.0,abc\n3.0,1.0\n")
    code, _, err = run(["fit", bad], capsys)
    assert code == 2
    assert "abc" in err or "line" in err


def test_env_config(data, tmp_path, capsys, monkeypatch):
    _, path = data
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"lambda_grid": [0.2], "lambda_prec_grid": [0.1]}))
    monkeypatch.setenv("CONSLASSO_CONFIG", str(cfg))
    code, out, _ = run(["fit", path], capsys)
    art = json.loads(out)["payload"]
    assert code == 0
    assert art["stage1"]["lambda"] == 0.2 and art["lambda_prec"] == 0.1
    cfg.write_text(json.dumps({"lambda_grid": [-1]}))
    assert run(["fit", path], capsys)[0] == 2


def test_simulate_identical_across_threads(tmp_path, capsys):
    files = []
    for threads in (1, 2):
        csv, js = tmp_path / f"t{threads}.csv", tmp_path / f"t{threads}.json"
        code, _, _ = run(
            ["simulate", "--experiment", "1b", "--reps", "3", "--seed", "5",
             "--threads", threads, "--out", csv, "--json", js],
            capsys,
        )
        assert code == 0
        files.append((csv.read_bytes(), json.dumps(payload(js), sort_keys=True)))
    assert files[0] == files[1]


def test_console_entry_point(data):
    _, path = data
    r = subprocess.run(
        [sys.executable, "-m", "conslasso.cli", "fit", str(path)],
        capture_output=True, text=True, check=False,
    )
    assert r.returncode == 0
    assert "payload" in json.loads(r.stdout)
