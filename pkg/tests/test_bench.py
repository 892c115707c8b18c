import math

import numpy as np
import pytest

from fmflcm import bench
from fmflcm.bench import BenchSpec, interpolate_curves, run_bench, score, summarize
from fmflcm.metrics import MSE_GRID
from fmflcm.simgen import SimConfig, true_coefficients
from fmflcm.tuning import TuningGrid

TINY = TuningGrid(rho_grid=(1.0,), r_grid=(0.01,), K_grid=(3,), n_lambda=8)


def test_spec_validation():
    assert BenchSpec().methods == ("fgs-net",)
    with pytest.raises(ValueError):
        BenchSpec(replicates=0)
    with pytest.raises(ValueError):
        BenchSpec(methods=("lasso",))
    with pytest.raises(ValueError):
        BenchSpec(methods=())


def test_score_of_the_truth():
    truth = true_coefficients(MSE_GRID, 9, 3)
    labels = np.repeat([0, 1, 2], 5)
    perm = np.array([1, 2, 0])
    s = score(perm[labels], truth[:, np.argsort(perm)], labels, 9, 3)
    assert s == {"ARI": 1.0, "C": 9, "IC": 0, "MSE": 0.0, "K": 3}
    s = score(labels, np.zeros_like(truth), labels, 9, 3)
    assert (s["C"], s["IC"], s["MSE"]) == (9, 18, 1.0)


def test_interpolation_is_exact_on_the_same_grid():
    t = np.linspace(0, 1, 11)
    c = np.random.default_rng(0).normal(size=(2, 3, 11))
    np.testing.assert_array_equal(interpolate_curves(c, t, t), c)
    lin = np.broadcast_to(2.0 * t, (1, 1, 11))
    np.testing.assert_allclose(interpolate_curves(lin, t, MSE_GRID)[0, 0], 2.0 * MSE_GRID, atol=1e-14)


def test_summary_means_and_failures():
    rows = [
        {"method": "fs", "ARI": 1.0, "C": 12, "IC": 0, "MSE": 0.1, "error": ""},
        {"method": "fs", "ARI": 0.5, "C": 10, "IC": 2, "MSE": 0.3, "error": ""},
        {"method": "fs", "ARI": math.nan, "C": math.nan, "IC": math.nan, "MSE": math.nan, "error": "boom"},
        {"method": "rp", "ARI": 0.2, "C": 0, "IC": 0, "MSE": 0.9, "error": ""},
    ]
    out = summarize(rows)
    assert [r["method"] for r in out] == ["fs", "rp"]
    fs, rp = out
    assert fs["replicates"] == 3 and fs["failed"] == 1
    assert fs["ARI"] == pytest.approx(0.75) and fs["C"] == 11 and fs["MSE"] == pytest.approx(0.2)
    assert fs["ARI_se"] == pytest.approx(np.std([1.0, 0.5], ddof=1) / math.sqrt(2))
    assert math.isnan(rp["ARI_se"])


def test_mixed_covariates():
    nz = np.array([[1, 1, 1], [0, 0, 0], [1, 0, 1], [0, 1, 0]], dtype=bool)
    assert bench.mixed_covariates(nz) == 2
    assert bench.mixed_covariates(np.ones((4, 1), dtype=bool)) == 0


def test_failed_fit_becomes_error_row(monkeypatch):
    def boom(*args, **kwargs):
        raise RuntimeError("every cell degenerate")

    monkeypatch.setattr(bench, "fit_method", boom)
    rows = bench.run_replicate((BenchSpec(sim=SimConfig(n=30, p=6, seed=5), replicates=1), 0))
    assert rows[0]["error"] == "every cell degenerate" and math.isnan(rows[0]["ARI"])


def test_small_bench_runs_every_method():
    spec = BenchSpec(sim=SimConfig(n=90, p=6, seed=11), replicates=2, methods=("fgs-net", "fs", "rp"),
                     K=3, grid=TINY)
    res = run_bench(spec, threads=1)
    assert len(res.rows) == 6
    assert [r["seed"] for r in res.rows if r["method"] == "rp"] == [11, 12]
    for r in res.rows:
        assert r["error"] == "" and r["K"] == 3
        assert r["C"] == 0 and 0 <= r["IC"] <= 18 and 0.0 <= r["MSE"]
        assert r["fits_examined"] == 1
        if r["method"] != "fs":
            assert r["mixed"] == 0
    rp = [r for r in res.rows if r["method"] == "rp"]
    assert all(r["IC"] == 0 for r in rp)
    again = run_bench(spec, threads=1)
    assert [r["MSE"] for r in again.rows] == [r["MSE"] for r in res.rows]
