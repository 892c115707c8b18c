import csv
import json
import os
import shutil
import subprocess

import numpy as np
import pytest

from fmflcm import io
from fmflcm._parallel import THREADS_ENV, resolve_threads
from fmflcm.cli import main
from fmflcm.fda import FunctionalDataset
from fmflcm.metrics import MSE_GRID
from fmflcm.penalty import PenaltyConfig
from fmflcm.rem import InitSpec, StopSpec, fit
from fmflcm.simgen import SimConfig, generate_dataset, true_coefficients

from conftest import random_dataset


def _write(path, text):
    path.write_text(text)
    return path


def test_load_toy_file(tmp_path):
    f = _write(tmp_path / "d.csv", "subject_id,time,y,x1,x2\n"
               "a,2000,1.0,0.1,0.2\na,2004,2.0,0.3,0.4\na,2002,1.5,0.5,0.6\n"
               "b,2000,0.0,1,2\nb,2002,1,3,4\nb,2004,2,5,6\n")
    data, scale, names = io.load_long_csv(f, with_scale=True)
    assert data.n == 2 and data.p == 2 and list(data.n_times) == [3, 3]
    np.testing.assert_array_equal(data.subjects[0].times, [0.0, 0.5, 1.0])
    np.testing.assert_array_equal(data.subjects[0].y, [1.0, 1.5, 2.0])
    assert names == ["x1", "x2"] and (scale.t_min, scale.t_max) == (2000.0, 2004.0)


@pytest.mark.parametrize("body,msg", [
    ("a,0,1,2\na,0,1,3\n", "row 3 duplicates"),
    ("a,0,1,2\na,1,1\n", "row 3 has 3 fields"),
    ("a,0,1,2\na,1,x,3\n", "row 3 has a missing or non-numeric"),
    ("a,0,1,2\na,1,,3\n", "row 3 has a missing or non-numeric"),
    ("a,0,1,nan\n", "row 2 has a missing or non-finite"),
    ("", "no data rows"),
])
def test_load_rejects_bad_rows(tmp_path, body, msg):
    f = _write(tmp_path / "d.csv", "subject_id,time,y,x1\n" + body)
    with pytest.raises(io.DataFormatError, match=msg):
        io.load_long_csv(f)


def test_load_rejects_bad_header(tmp_path):
    with pytest.raises(io.DataFormatError):
        io.load_long_csv(_write(tmp_path / "d.csv", "id,time,y,x1\na,0,1,2\n"))
    with pytest.raises(io.DataFormatError):
        io.load_long_csv(_write(tmp_path / "e.csv", ""))


def test_round_trip_is_lossless(tmp_path):
    data, _ = generate_dataset(SimConfig(n=15, p=7, seed=2))
    io.write_long_csv(tmp_path / "d.csv", data)
    back = io.load_long_csv(tmp_path / "d.csv")
    np.testing.assert_allclose(back.y, data.y, atol=1e-12, rtol=0)
    np.testing.assert_allclose(back.x, data.x, atol=1e-12, rtol=0)
    np.testing.assert_allclose(back.t, data.t, atol=1e-12, rtol=0)
    assert back.ids == [str(i) for i in data.ids]


def test_normalization_examples():
    t = np.linspace(0, 1, 4)
    x = np.column_stack([np.array([1.0, -1.0, 1.0, -1.0]), np.full(4, -3.0), np.zeros(4)])
    y = np.exp(0.5 + 2.0 * t)
    data = FunctionalDataset.from_arrays([t], [y], [x])
    with pytest.warns(UserWarning, match="dropping"):
        out, rec = io.normalize_dataset(data, log_response=True)
    assert rec.kept == [0, 1] and rec.dropped == [2]
    np.testing.assert_array_equal(out.x[:, 0], x[:, 0])
    np.testing.assert_array_equal(out.x[:, 1], -1.0)
    np.testing.assert_allclose(out.y, 0.5 + 2.0 * t, atol=1e-14)
    with pytest.raises(ValueError):
        io.normalize_dataset(data.with_values(y=-y), log_response=True)


def test_back_transform_matches_unnormalized_fit():
    data, _ = random_dataset(n=10, p=3, seed=3, K=1)
    data = data.with_values(x=data.x * np.array([5.0, 0.2, 3.0]))
    norm, rec = io.normalize_dataset(data)
    np.testing.assert_allclose(np.mean(norm.x**2, axis=0), 1.0)
    stop = StopSpec(solver_tol=1e-12, max_sweeps=10000)
    raw = fit(data, 1, PenaltyConfig("fgs-net", lam=0.0, r=0.01), stop=stop)
    scaled = fit(norm, 1, PenaltyConfig("fgs-net", lam=0.0, r=0.01), stop=stop)
    t = np.linspace(0, 1, 51)
    np.testing.assert_allclose(rec.back_transform(scaled.curves(t), 3), raw.curves(t), atol=1e-6)


def test_atomic_writes_leave_nothing_behind(tmp_path):
    target = tmp_path / "out.json"
    io.write_json(target, {"a": 1})
    with pytest.raises(RuntimeError):
        with io.atomic_open(target, "w") as fh:
            fh.write("partial")
            raise RuntimeError("interrupted")
    assert json.loads(target.read_text()) == {"a": 1}
    with pytest.raises(TypeError):
        io.write_json(tmp_path / "new.json", {"bad": object()})
    assert sorted(p.name for p in tmp_path.iterdir()) == ["out.json"]


def test_report_round_trip(tmp_path, small_data):
    data, _ = small_data
    f = fit(data, 2, PenaltyConfig("fs-net", lam=0.01, rho=0.5, r=0.01), InitSpec(seed=1))
    io.write_json(tmp_path / "r.json", io.fit_report(f, data))
    rep = io.read_json(tmp_path / "r.json")
    assert rep["schema_version"] == io.SCHEMA_VERSION
    g = io.fit_from_report(rep)
    assert -2 * g.loglik + 2 * g.df == g.aic == f.aic
    assert -2 * g.loglik + g.df * np.log(g.n_obs) == g.bic == f.bic
    t = np.linspace(0, 1, 33)
    np.testing.assert_allclose(g.curves(t), f.curves(t), atol=1e-12)
    np.testing.assert_array_equal(g.labels, f.labels)
    with pytest.raises(ValueError, match="schema"):
        io.fit_from_report({**rep, "schema_version": "other/0"})


def test_thread_resolution(monkeypatch):
    monkeypatch.delenv(THREADS_ENV, raising=False)
    assert resolve_threads(None) == 1
    monkeypatch.setenv(THREADS_ENV, "3")
    assert resolve_threads(None) == 3
    assert resolve_threads(2) == 2
    with pytest.raises(ValueError):
        resolve_threads(0)


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_cli_simulate_fit_evaluate(tmp_path, capsys):
    sim = tmp_path / "sim"
    assert main(["simulate", "--n", "45", "--p", "7", "--alpha", "0.4", "--snr", "12", "--seed", "7",
                 "--out", str(sim)]) == 0
    assert (sim / "data.csv").exists() and (sim / "truth.json").exists()
    out = tmp_path / "fit"
    assert main(["fit", "--data", str(sim / "data.csv"), "--out", str(out), "--penalty", "fgs-net", "--K", "3",
                 "--rho", "0.75", "--r", "0.01", "--seed", "1", "--n-starts", "2", "--tol", "1e-6",
                 "--max-iter", "100", "--grid-n-lambda", "10"]) == 0
    rep = io.read_json(out / "report.json")
    assert rep["schema_version"] == io.SCHEMA_VERSION and rep["K"] == 3
    rows = _read_csv(out / "curves.csv")
    assert len(rows) == 101 and "beta_j7_k3" in rows[0] and "time" in rows[0]
    assert (out / "coefficients.png").stat().st_size > 0 and (out / "trace.png").exists()
    assert main(["evaluate", "--truth", str(sim / "truth.json"), "--report", str(out / "report.json"),
                 "--out", str(tmp_path / "metrics.json")]) == 0
    m = io.read_json(tmp_path / "metrics.json")
    assert {"ARI", "C", "IC", "MSE"} <= set(m)
    assert 0 <= m["C"] <= 3 and 0 <= m["IC"] <= 18 and m["MSE"] >= 0


def test_cli_fixed_lambda_single_cluster(tmp_path):
    sim = tmp_path / "sim"
    main(["simulate", "--n", "20", "--p", "6", "--seed", "1", "--out", str(sim)])
    out = tmp_path / "fit"
    assert main(["fit", "--data", str(sim / "data.csv"), "--out", str(out), "--K", "1", "--penalty", "fgs-net",
                 "--lambda", "0.01", "--normalize"]) == 0
    rep = io.read_json(out / "report.json")
    assert rep["K"] == 1 and rep["chosen"]["lambda"] == 0.01
    assert np.allclose(rep["omega"], 1.0)
    assert (out / "curves_original_scale.csv").exists()
    assert "normalization" in rep


def test_cli_evaluate_perfect_external_estimate(tmp_path):
    sim = tmp_path / "sim"
    main(["simulate", "--n", "30", "--p", "8", "--seed", "3", "--out", str(sim)])
    truth = io.read_json(sim / "truth.json")
    io.write_rows(tmp_path / "labels.csv", [{"subject_id": s, "label": l}
                                            for s, l in zip(truth["subject_ids"], truth["labels"])])
    curves = true_coefficients(MSE_GRID, 8, 3)
    io.write_rows(tmp_path / "coef.csv", io.curve_rows(MSE_GRID, curves))
    assert main(["evaluate", "--truth", str(sim / "truth.json"), "--labels", str(tmp_path / "labels.csv"),
                 "--coef", str(tmp_path / "coef.csv"), "--out", str(tmp_path / "m.json")]) == 0
    m = io.read_json(tmp_path / "m.json")
    assert m["ARI"] == 1.0 and m["MSE"] == 0.0 and (m["C"], m["IC"]) == (6, 0)


def test_cli_tune_bootstrap_bench(tmp_path, monkeypatch):
    monkeypatch.setenv(THREADS_ENV, "1")
    sim = tmp_path / "sim"
    main(["simulate", "--n", "36", "--p", "6", "--seed", "4", "--out", str(sim)])
    tune = tmp_path / "tune"
    assert main(["tune", "--data", str(sim / "data.csv"), "--out", str(tune), "--grid-rho", "0.5,1",
                 "--grid-r", "0.01", "--grid-K", "1,2", "--grid-n-lambda", "8"]) == 0
    rows = _read_csv(tune / "tuning.csv")
    assert {r["K"] for r in rows} == {"1", "2"} and (tune / "criteria.png").exists()
    boot = tmp_path / "boot"
    assert main(["bootstrap", "--data", str(sim / "data.csv"), "--report", str(tune / "report.json"),
                 "--out", str(boot), "--B", "20"]) == 0
    assert len(_read_csv(boot / "bands.csv")) == 101
    assert io.read_json(boot / "bands.json")["B"] == 20 and (boot / "bands.png").exists()
    bench = tmp_path / "bench"
    assert main(["bench", "--n", "36", "--p", "6", "--replicates", "2", "--methods", "fgs-net,rp",
                 "--K", "3", "--grid-rho", "1", "--grid-r", "0.01", "--grid-n-lambda", "8",
                 "--threads", "1", "--out", str(bench)]) == 0
    summ = _read_csv(bench / "summary.csv")
    assert [r["method"] for r in summ] == ["fgs-net", "rp"]
    assert len(_read_csv(bench / "replicates.csv")) == 4
    assert io.read_json(bench / "summary.json")["schema_version"] == io.SCHEMA_VERSION
    assert (bench / "summary.png").exists()


def test_cli_errors_exit_nonzero(tmp_path, capsys):
    bad = _write(tmp_path / "bad.csv", "subject_id,time,y,x1\na,0,1,2\na,0,1,2\n")
    assert main(["fit", "--data", str(bad), "--out", str(tmp_path / "o"), "--K", "1"]) == 2
    assert "duplicates" in capsys.readouterr().err
    assert not (tmp_path / "o").exists() or not any((tmp_path / "o").iterdir())
    assert main(["evaluate", "--truth", str(bad), "--out", str(tmp_path / "m.json")]) == 2
    with pytest.raises(SystemExit):
        main(["fit", "--data", str(bad), "--out", "o", "--penalty", "lasso"])


def test_console_script_is_installed(tmp_path):
    exe = shutil.which("fmflcm")
    if exe is None:
        pytest.skip("package not installed with its console script")
    out = subprocess.run([exe, "simulate", "--n", "6", "--p", "6", "--seed", "3", "--out", str(tmp_path)],
                         capture_output=True, text=True, timeout=300)
    assert out.returncode == 0, out.stderr
    truth = json.loads((tmp_path / "truth.json").read_text())
    assert truth["schema_version"] == io.SCHEMA_VERSION
    bad = subprocess.run([exe, "fit", "--data", str(tmp_path / "missing.csv"), "--out", str(tmp_path / "f")],
                         capture_output=True, text=True, timeout=300)
    assert bad.returncode == 2
