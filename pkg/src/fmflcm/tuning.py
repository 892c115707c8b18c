"""Hyperparameter selection: lambda path inside each M-step, AIC over (rho, r), BIC over K."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from ._parallel import parallel_map
from .fda import FunctionalDataset, build_basis
from .penalty import PenaltyConfig
from .rem import (
    FitResult,
    InitSpec,
    StopSpec,
    _obs_logdens,
    _update_sigma2,
    best_of_starts,
    block_dimensions,
    parameter_count,
    run_em,
)
from .solver import WorkingProblem, alpha_design, solve

log = logging.getLogger(__name__)

PATH_SCORES = ("aic", "loglik")
LAMBDA_FLOOR = np.finfo(float).eps


@dataclass(frozen=True)
class TuningGrid:
    n_lambda: int = 30
    lambda_ratio: float = 0.01
    rho_grid: tuple = (0.0, 0.25, 0.5, 0.75, 1.0)
    r_grid: tuple = (1e-4, 1e-2, 1.0)
    K_grid: tuple = (1, 2, 3, 4, 5)
    path_score: str = "aic"
    patience: int = 5
    max_df_fraction: float = 0.5
    freeze_after: int = 30

    def __post_init__(self):
        if self.n_lambda < 1:
            raise ValueError("lambda path needs at least one value")
        if not 0.0 < self.lambda_ratio <= 1.0:
            raise ValueError("lambda_ratio must lie in (0, 1]")
        for name in ("rho_grid", "r_grid", "K_grid"):
            vals = tuple(getattr(self, name))
            if not vals:
                raise ValueError(f"{name} is empty")
            object.__setattr__(self, name, vals)
        if any(not 0.0 <= v <= 1.0 for v in self.rho_grid):
            raise ValueError("rho values must lie in [0, 1]")
        if any(v < 0 for v in self.r_grid):
            raise ValueError("r values must be nonnegative")
        if any(int(k) != k or k < 1 for k in self.K_grid):
            raise ValueError("K values must be positive integers")
        if self.path_score not in PATH_SCORES:
            raise ValueError(f"path_score must be one of {PATH_SCORES}")
        if self.patience < 1:
            raise ValueError("patience must be positive")
        if self.freeze_after < 1:
            raise ValueError("freeze_after must be positive")

    def lambda_path(self, lam_max: float) -> np.ndarray:
        """Strictly decreasing log-spaced path from ``lam_max``."""
        if self.n_lambda == 1:
            return np.array([lam_max])
        return lam_max * np.geomspace(1.0, self.lambda_ratio, self.n_lambda)


def lambda_max(problem: WorkingProblem, config: PenaltyConfig) -> float:
    """Smallest lambda at which every group is zero.

    A group stays at zero exactly when its gradient norm at zero is at most
    ``rho * lambda``.  Penalties without a sparsity part have no such lambda.
    For ``rho = 0`` the largest gradient norm anchors the path.  For rp the
    anchor is the largest generalized eigenvalue of ``(G, 2 S)`` over blocks,
    the lambda at which the best-determined smooth direction is shrunk by half.
    """
    if not np.any(problem.H):
        raise ValueError("all-zero design")
    if config.kind == "rp":
        return max(_roughness_anchor(problem), LAMBDA_FLOOR)
    g = problem.smooth_gradient(np.zeros((problem.p, problem.K, problem.L)))
    if config.grouped:
        norms = np.sqrt(np.sum(g * g, axis=(1, 2)))
    else:
        norms = np.sqrt(np.sum(g * g, axis=2))
    top = float(norms.max())
    if config.rho > 0.0:
        top /= config.rho
    return max(top, LAMBDA_FLOOR)


def _roughness_anchor(problem: WorkingProblem) -> float:
    ev, U = np.linalg.eigh(problem.roughness_alpha)
    keep = ev > 1e-10 * max(ev.max(), 0.0)
    if not np.any(keep):
        return float(np.max(problem.nu)) / 2.0
    T = U[:, keep] / np.sqrt(ev[keep])
    reduced = np.einsum("la,jklm,mb->jkab", T, problem.block_gram, T)
    return float(np.linalg.eigvalsh(reduced).max()) / 2.0


def _nonzero_blocks(config: PenaltyConfig, alpha: np.ndarray) -> np.ndarray:
    if config.kind == "rp":
        return np.ones(alpha.shape[:2], dtype=bool)
    return np.any(alpha != 0.0, axis=2)


def _path_score(kind, data, prob, cfg, alpha, omega, sigma2, pi) -> tuple:
    """Per-step criterion for one lambda; smaller is better.

    ``aic``: minus twice the mixture composite log-likelihood at the current
    mixing weights and refreshed variances, plus ``2 df``.  ``loglik``: the
    same with the responsibility-weighted complete-data log-likelihood.
    """
    mu = prob.fitted(alpha)
    s2 = _update_sigma2(data, omega, mu, sigma2)
    df = parameter_count(block_dimensions(prob, cfg), _nonzero_blocks(cfg, alpha), prob.K)
    if kind == "aic":
        logf = _obs_logdens(data.y, mu, s2)
        with np.errstate(divide="ignore"):
            value = -2.0 * float(np.sum(logsumexp(logf + np.log(pi)[:, None], axis=0)))
    else:
        n_k = data.n_times @ omega
        value = float(np.sum(n_k * (np.log(2.0 * math.pi * s2) + 1.0)))
    return value + 2.0 * df, df


def path_beta_step(data: FunctionalDataset, base: PenaltyConfig, grid: TuningGrid, stop: StopSpec):
    """Coefficient step that runs the lambda path and keeps the best-scoring lambda.

    After ``grid.freeze_after`` calls the last chosen lambda is kept fixed,
    so the EM loop can settle when the selection keeps alternating.
    """
    max_df = grid.max_df_fraction * data.n_obs
    state = {"calls": 0, "cfg": None}

    def step(prob, alpha_prev, omega, sigma2):
        state["calls"] += 1
        if state["cfg"] is not None and state["calls"] > grid.freeze_after:
            cfg = state["cfg"]
            return solve(prob, cfg, alpha_prev, stop.solver_tol, stop.max_sweeps).alpha, cfg
        pi = omega.sum(axis=0) / omega.shape[0]
        lam_max = lambda_max(prob, base)
        alpha = np.zeros_like(alpha_prev)
        best = None
        since = 0

        def visit(lam):
            nonlocal alpha, best, since
            cfg = base.with_lambda(float(lam))
            alpha = solve(prob, cfg, alpha, stop.solver_tol, stop.max_sweeps).alpha
            score, df = _path_score(grid.path_score, data, prob, cfg, alpha, omega, sigma2, pi)
            if best is None or score < best[0]:
                best = (score, alpha.copy(), cfg)
                since = 0
            else:
                since += 1
            return since >= grid.patience or df > max_df

        for lam in grid.lambda_path(lam_max):
            if visit(lam):
                break
        state["cfg"] = best[2]
        return best[1], best[2]

    return step


def fit_with_lambda_path(
    data: FunctionalDataset,
    K: int,
    rho: float,
    r: float,
    init: InitSpec = InitSpec(),
    grid: TuningGrid = TuningGrid(),
    kind: str = "fgs-net",
    stop: StopSpec = StopSpec(),
    estep: str = "product",
    gamma: float = 3.7,
) -> FitResult:
    """Penalized EM with lambda re-selected along a warm-started path in every M-step.

    The chosen lambda differs between starts, so starts are compared by AIC
    rather than by their penalized objectives.
    """
    base = PenaltyConfig(kind=kind, lam=0.0, rho=rho, gamma=gamma, r=r)
    basis = build_basis(data.time_union, r)
    H = alpha_design(data, basis)
    res = best_of_starts(
        lambda om, seed: run_em(data, basis, K, base, om, path_beta_step(data, base, grid, stop), stop, estep, seed, H),
        data, K, init, score=lambda f: -f.aic,
    )
    res.extra["path_score"] = grid.path_score
    return res


def degrees_of_freedom(fit: FitResult) -> float:
    """Parameter count used by AIC and BIC.

    Sum over nonzero coefficient blocks of their effective dimension, plus
    ``K - 1`` mixing weights and ``K`` variances.
    """
    return parameter_count(fit.block_dims, fit.support_blocks, fit.K)


def aic(loglik: float, df: float) -> float:
    return -2.0 * loglik + 2.0 * df


def bic(loglik: float, df: float, n_obs: int) -> float:
    return -2.0 * loglik + df * math.log(n_obs)


@dataclass
class CellResult:
    K: int
    rho: float
    r: float
    fit: FitResult | None
    error: str | None = None

    def row(self) -> dict:
        f = self.fit
        base = {"K": self.K, "rho": self.rho, "r": self.r}
        if f is None:
            return {**base, "lambda": math.nan, "loglik": math.nan, "df": math.nan, "aic": math.nan,
                    "bic": math.nan, "converged": False, "iterations": 0, "degenerate": True,
                    "n_support": 0, "error": self.error}
        return {**base, "lambda": f.config.lam_scalar, "loglik": f.loglik, "df": f.df, "aic": f.aic,
                "bic": f.bic, "converged": f.converged, "iterations": f.iterations,
                "degenerate": f.degenerate, "n_support": len(f.support), "error": ""}


@dataclass
class TuningReport:
    cells: list = field(default_factory=list)
    best: FitResult | None = None

    def table(self) -> list:
        return [c.row() for c in self.cells]


def _cell_grid(kind: str, grid: TuningGrid) -> list:
    rhos = grid.rho_grid if kind in ("fs-net", "fgs-net") else (1.0 if kind == "fs" else 0.0,)
    rhos = sorted(set(float(v) for v in rhos))
    return [(rho, float(r)) for r in grid.r_grid for rho in rhos]


def _run_cell(args) -> CellResult:
    data, K, rho, r, init, grid, kind, stop, estep, gamma = args
    try:
        f = fit_with_lambda_path(data, K, rho, r, init, grid, kind, stop, estep, gamma)
    except (FloatingPointError, RuntimeError, np.linalg.LinAlgError) as exc:
        log.warning("cell K=%d rho=%g r=%g failed: %s", K, rho, r, exc)
        return CellResult(K, rho, r, None, str(exc))
    return CellResult(K, rho, r, f)


def _usable(c: CellResult) -> bool:
    return c.fit is not None and not c.fit.degenerate


def select_rho_r(
    data: FunctionalDataset,
    K: int,
    grid: TuningGrid = TuningGrid(),
    init: InitSpec = InitSpec(),
    kind: str = "fgs-net",
    stop: StopSpec = StopSpec(),
    estep: str = "product",
    gamma: float = 3.7,
    threads: int = 1,
) -> tuple:
    """AIC-minimizing (rho, r) for fixed K; ties go to larger r, then larger rho.

    Returns ``(rho, r, fit, cells)``.
    """
    jobs = [(data, K, rho, r, init, grid, kind, stop, estep, gamma) for rho, r in _cell_grid(kind, grid)]
    cells = parallel_map(_run_cell, jobs, threads)
    ok = [c for c in cells if _usable(c)]
    if not ok:
        raise RuntimeError(f"every (rho, r) cell failed or was degenerate at K={K}")
    best = min(ok, key=lambda c: (c.fit.aic, -c.r, -c.rho))
    return best.rho, best.r, best.fit, cells


def select_K(
    data: FunctionalDataset,
    grid: TuningGrid = TuningGrid(),
    init: InitSpec = InitSpec(),
    kind: str = "fgs-net",
    stop: StopSpec = StopSpec(),
    estep: str = "product",
    gamma: float = 3.7,
    threads: int = 1,
) -> tuple:
    """BIC-minimizing K over ``grid.K_grid``; ties go to the smaller K.

    Returns ``(K, fit, report)``.
    """
    report = TuningReport()
    winners = []
    for K in sorted(int(k) for k in grid.K_grid):
        if K > data.n:
            continue
        try:
            _, _, f, cells = select_rho_r(data, K, grid, init, kind, stop, estep, gamma, threads)
        except RuntimeError as exc:
            log.warning("K=%d skipped: %s", K, exc)
            report.cells.append(CellResult(K, math.nan, math.nan, None, str(exc)))
            continue
        report.cells.extend(cells)
        winners.append((f.bic, K, f))
    if not winners:
        raise RuntimeError("no K produced a usable fit")
    _, K, f = min(winners, key=lambda w: (w[0], w[1]))
    report.best = f
    return K, f, report
