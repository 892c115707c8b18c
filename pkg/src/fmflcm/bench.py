"""Replicate harness: simulate, fit each method, score against the truth, average."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import metrics
from ._parallel import parallel_map
from .rem import InitSpec, StopSpec
from .simgen import N_ACTIVE, SimConfig, generate_dataset, true_coefficients
from .tuning import TuningGrid, select_K, select_rho_r

METHODS = ("fgs-net", "fs-net", "fs", "rp")
METRIC_NAMES = ("ARI", "C", "IC", "MSE")


@dataclass(frozen=True)
class BenchSpec:
    """One simulation cell run over ``replicates`` seeds.

    Sparse methods start from a random partition and pick K by BIC over
    ``grid.K_grid`` unless ``K`` is fixed; ``rp`` always starts from the true
    labels with K fixed at the true count.
    """

    sim: SimConfig = SimConfig()
    replicates: int = 20
    methods: tuple = ("fgs-net",)
    K: int | None = None
    grid: TuningGrid = TuningGrid()
    n_starts: int = 1
    stop: StopSpec = StopSpec()

    def __post_init__(self):
        if self.replicates < 1:
            raise ValueError("replicates must be positive")
        bad = [m for m in self.methods if m not in METHODS]
        if bad or not self.methods:
            raise ValueError(f"methods must be a nonempty subset of {METHODS}")
        object.__setattr__(self, "methods", tuple(self.methods))


def score(labels, curves, truth_labels, p: int, K_true: int, t=metrics.MSE_GRID, nonzero=None) -> dict:
    """ARI, C, IC and MSE of an estimate against the simulation truth.

    ``curves`` (p, K_est, len(t)); zero blocks are read from ``nonzero``
    when given, else from exact zeros in ``curves``.
    """
    curves = np.asarray(curves, dtype=float)
    truth_labels = np.asarray(truth_labels, dtype=int)
    labels = np.asarray(labels, dtype=int)
    K_est = curves.shape[1]
    perm = metrics.align_clusters(labels, truth_labels, K_est, K_true)
    C, IC = metrics.selection_counts(curves if nonzero is None else np.asarray(nonzero, dtype=bool),
                                     active=range(N_ACTIVE))
    mse = metrics.coef_mse(curves, true_coefficients(t, p, K_true), perm, t)
    return {"ARI": metrics.ari(labels, truth_labels), "C": C, "IC": IC, "MSE": mse, "K": K_est}


def interpolate_curves(curves, t_from, t_to=metrics.MSE_GRID) -> np.ndarray:
    """Linear interpolation of (p, K, len(t_from)) curves onto ``t_to``."""
    curves = np.asarray(curves, dtype=float)
    t_from = np.asarray(t_from, dtype=float)
    out = np.empty(curves.shape[:2] + (len(t_to),))
    for j in range(curves.shape[0]):
        for k in range(curves.shape[1]):
            out[j, k] = np.interp(t_to, t_from, curves[j, k])
    return out


def mixed_covariates(support_blocks) -> int:
    """Covariates that are zero in some clusters and nonzero in others."""
    nz = np.asarray(support_blocks, dtype=bool)
    return int(np.sum(nz.any(axis=1) & ~nz.all(axis=1)))


def fit_method(method: str, data, truth, spec: BenchSpec, seed: int) -> tuple:
    """Fit one method on one replicate.

    Returns the chosen FitResult and every fit examined on the way to it.
    """
    K_true = spec.sim.K
    if method == "rp":
        init = InitSpec(strategy="labels", labels=truth.labels, seed=seed)
        _, _, f, cells = select_rho_r(data, K_true, spec.grid, init, "rp", spec.stop)
    elif spec.K is not None:
        init = InitSpec(strategy="random", seed=seed, n_starts=spec.n_starts)
        _, _, f, cells = select_rho_r(data, spec.K, spec.grid, init, method, spec.stop)
    else:
        init = InitSpec(strategy="random", seed=seed, n_starts=spec.n_starts)
        _, f, report = select_K(data, spec.grid, init, method, spec.stop)
        cells = report.cells
    return f, [c.fit for c in cells if c.fit is not None]


def run_replicate(args) -> list:
    spec, rep = args
    sim = replace(spec.sim, seed=spec.sim.seed + rep)
    data, truth = generate_dataset(sim)
    rows = []
    for method in spec.methods:
        t0 = time.perf_counter()
        try:
            f, examined = fit_method(method, data, truth, spec, sim.seed)
        except RuntimeError as exc:
            rows.append({"replicate": rep, "seed": sim.seed, "method": method, "ARI": math.nan, "C": math.nan,
                         "IC": math.nan, "MSE": math.nan, "K": 0, "seconds": time.perf_counter() - t0,
                         "error": str(exc)})
            continue
        nonzero = f.support_blocks if method != "rp" else np.ones_like(f.support_blocks)
        s = score(f.labels, f.curves(metrics.MSE_GRID), truth.labels, sim.p, sim.K, nonzero=nonzero)
        rows.append({"replicate": rep, "seed": sim.seed, "method": method, **s, "rho": f.config.rho,
                     "r": f.config.r, "lambda": f.config.lam_scalar, "converged": f.converged,
                     "n_support": len(f.support), "mixed": mixed_covariates(f.support_blocks),
                     "fits_with_mixed": sum(mixed_covariates(g.support_blocks) > 0 for g in examined),
                     "fits_examined": len(examined), "seconds": time.perf_counter() - t0, "error": ""})
    return rows


def summarize(rows: list) -> list:
    """Per-method means (and standard errors) over replicates; failed fits are counted, not averaged."""
    out = []
    for method in dict.fromkeys(r["method"] for r in rows):
        mine = [r for r in rows if r["method"] == method]
        ok = [r for r in mine if not r.get("error")]
        row = {"method": method, "replicates": len(mine), "failed": len(mine) - len(ok)}
        for m in METRIC_NAMES:
            vals = np.array([float(r[m]) for r in ok])
            row[m] = float(vals.mean()) if vals.size else math.nan
            row[f"{m}_se"] = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else math.nan
        out.append(row)
    return out


@dataclass
class BenchResult:
    spec: BenchSpec
    rows: list = field(default_factory=list)
    summary: list = field(default_factory=list)


def run_bench(spec: BenchSpec, threads: int | None = 1) -> BenchResult:
    """Run every replicate (in parallel when ``threads > 1``) and average by method."""
    per_rep = parallel_map(run_replicate, [(spec, r) for r in range(spec.replicates)], threads)
    rows = [row for rep in per_rep for row in rep]
    return BenchResult(spec=spec, rows=rows, summary=summarize(rows))
