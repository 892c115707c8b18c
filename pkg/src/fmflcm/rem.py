"""Regularized EM for finite mixtures of functional linear concurrent models."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.special import logsumexp

from .fda import (
    SIGMA2_FLOOR,
    FunctionalDataset,
    MixtureParams,
    Responsibilities,
    SplineBasis,
    build_basis,
)
from .penalty import PenaltyConfig, penalty_value
from .solver import DEFAULT_MAX_SWEEPS, DEFAULT_TOL, WorkingProblem, alpha_design, assemble_problem, solve

log = logging.getLogger(__name__)

PI_FLOOR = 1e-12
EMPTY_FRACTION = 1e-6
ESTEP_MODES = ("product", "sum")


@dataclass(frozen=True)
class InitSpec:
    strategy: str = "random"
    seed: int = 0
    labels: tuple | None = None
    n_starts: int = 1


@dataclass(frozen=True)
class StopSpec:
    tol: float = 1e-6
    max_iter: int = 200
    solver_tol: float = DEFAULT_TOL
    max_sweeps: int = DEFAULT_MAX_SWEEPS


@dataclass
class FitResult:
    params: MixtureParams
    omega: Responsibilities
    labels: np.ndarray
    support: list
    support_blocks: np.ndarray
    trace: list
    loglik: float
    df: float
    aic: float
    bic: float
    config: PenaltyConfig
    basis: SplineBasis
    converged: bool
    iterations: int
    seed: int
    n_obs: int
    block_dims: np.ndarray = field(repr=False)
    lambda_trace: list = field(default_factory=list)
    restarts: list = field(default_factory=list)
    degenerate: bool = False
    estep: str = "product"
    extra: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return self.params.K

    @property
    def chosen(self) -> dict:
        return {
            "lambda": self.config.lam_scalar if not isinstance(self.config.lam, tuple) else list(self.config.lam),
            "rho": self.config.rho,
            "r": self.config.r,
            "K": self.K,
        }

    @property
    def alpha(self) -> np.ndarray:
        return self.basis.to_alpha(self.params.b)

    def curves(self, t) -> np.ndarray:
        """Coefficient functions on ``t``, shape (p, K, len(t))."""
        return self.basis.evaluate(self.params.b, t)


# ---------------------------------------------------------------------------
# likelihood pieces


def _fitted(params: MixtureParams, basis: SplineBasis, data: FunctionalDataset, H=None) -> np.ndarray:
    if H is None:
        H = alpha_design(data, basis)
    alpha = basis.to_alpha(params.b)
    return np.einsum("jnl,jkl->kn", H, alpha)


def _obs_logdens(y: np.ndarray, mu: np.ndarray, sigma2: np.ndarray) -> np.ndarray:
    s2 = sigma2[:, None]
    return -0.5 * np.log(2.0 * math.pi * s2) - (y[None, :] - mu) ** 2 / (2.0 * s2)


def _segment_starts(data: FunctionalDataset) -> np.ndarray:
    return np.concatenate([[0], np.cumsum(data.n_times)[:-1]])


def subject_logdens(data: FunctionalDataset, mu: np.ndarray, sigma2, estep: str = "product") -> np.ndarray:
    """Per-subject, per-cluster log densities, shape (n, K).

    ``product`` sums per-time log densities; ``sum`` takes the log of the
    summed per-time densities.
    """
    logf = _obs_logdens(data.y, mu, np.asarray(sigma2, dtype=float))
    starts = _segment_starts(data)
    if estep == "product":
        return np.add.reduceat(logf, starts, axis=1).T
    if estep == "sum":
        m = np.maximum.reduceat(logf, starts, axis=1)
        ex = np.exp(logf - np.repeat(m, data.n_times, axis=1))
        return (np.log(np.add.reduceat(ex, starts, axis=1)) + m).T
    raise ValueError(f"unknown E-step form {estep!r}")


def composite_loglik(params: MixtureParams, basis: SplineBasis, data: FunctionalDataset, H=None) -> float:
    """Sum over observations of log sum_k pi_k N(y; x'beta_k, sigma2_k)."""
    mu = _fitted(params, basis, data, H)
    logf = _obs_logdens(data.y, mu, params.sigma2)
    with np.errstate(divide="ignore"):
        logpi = np.log(params.pi)[:, None]
    value = float(np.sum(logsumexp(logf + logpi, axis=0)))
    if not math.isfinite(value):
        raise FloatingPointError("composite log-likelihood is not finite")
    return value


def _mixture_loglik(sub_ll: np.ndarray, pi: np.ndarray) -> float:
    """Subject-level mixture log-likelihood, the objective ascended by the EM loop."""
    with np.errstate(divide="ignore"):
        logpi = np.log(pi)
    return float(np.sum(logsumexp(sub_ll + logpi[None, :], axis=1)))


def _responsibilities(sub_ll: np.ndarray, pi: np.ndarray) -> Responsibilities:
    pi = np.maximum(pi, PI_FLOOR)
    pi = pi / pi.sum()
    logw = sub_ll + np.log(pi)[None, :]
    norm = logsumexp(logw, axis=1, keepdims=True)
    if not np.all(np.isfinite(norm)):
        raise FloatingPointError("a subject has zero likelihood under every cluster")
    omega = np.exp(logw - norm)
    omega /= omega.sum(axis=1, keepdims=True)
    return Responsibilities(omega)


def e_step(params: MixtureParams, basis: SplineBasis, data: FunctionalDataset, estep: str = "product", H=None) -> Responsibilities:
    """Posterior cluster probabilities given the current parameters."""
    mu = _fitted(params, basis, data, H)
    return _responsibilities(subject_logdens(data, mu, params.sigma2, estep), params.pi)


def _update_pi(omega: np.ndarray) -> np.ndarray:
    pi = omega.sum(axis=0) / omega.shape[0]
    return pi / pi.sum()


def _update_sigma2(data: FunctionalDataset, omega: np.ndarray, mu: np.ndarray, prev: np.ndarray) -> np.ndarray:
    w = omega[data.subject_index].T
    rss = np.sum(w * (data.y[None, :] - mu) ** 2, axis=1)
    denom = np.sum(w, axis=1)
    out = np.array(prev, dtype=float, copy=True)
    ok = denom > 1e-12 * data.n_obs
    out[ok] = rss[ok] / denom[ok]
    return np.maximum(out, SIGMA2_FLOOR)


def m_step(
    data: FunctionalDataset,
    basis: SplineBasis,
    omega,
    params_prev: MixtureParams,
    config: PenaltyConfig,
    H=None,
    stop: StopSpec = StopSpec(),
) -> MixtureParams:
    """Coefficients by penalized group descent, then mixing weights, then variances."""
    omega = np.asarray(getattr(omega, "omega", omega), dtype=float)
    prob = assemble_problem(data, basis, omega, params_prev.sigma2, H=H)
    res = solve(prob, config, basis.to_alpha(params_prev.b), stop.solver_tol, stop.max_sweeps)
    mu = prob.fitted(res.alpha)
    pi = _update_pi(omega)
    sigma2 = _update_sigma2(data, omega, mu, params_prev.sigma2)
    return MixtureParams(basis.from_alpha(res.alpha), sigma2, pi)


# ---------------------------------------------------------------------------
# initialization


def _ols_features(data: FunctionalDataset) -> np.ndarray:
    feats = np.empty((data.n, data.p + 1))
    for i, s in enumerate(data.subjects):
        X = np.column_stack([np.ones(s.n_times), s.x])
        feats[i] = np.linalg.lstsq(X, s.y, rcond=None)[0]
    scale = feats.std(axis=0)
    scale[scale == 0] = 1.0
    return (feats - feats.mean(axis=0)) / scale


def initialize(data: FunctionalDataset, K: int, strategy: str = "random", seed: int = 0, labels=None) -> Responsibilities:
    """Starting hard responsibilities.

    ``random`` draws uniform multinomial labels, ``labels`` uses supplied
    labels, ``kmeans-lite`` clusters per-subject least-squares fits.
    """
    n = data.n
    if K < 1 or K > n:
        raise ValueError(f"need 1 <= K <= n, got K={K}, n={n}")
    if K == 1:
        return Responsibilities(np.ones((n, 1)))
    if strategy == "labels":
        if labels is None:
            raise ValueError("labels strategy needs labels")
        labels = np.asarray(labels, dtype=int)
        if labels.shape != (n,) or labels.min() < 0 or labels.max() >= K:
            raise ValueError("labels must be n integers in [0, K)")
        return Responsibilities.from_labels(labels, K)
    rng = np.random.default_rng(seed)
    feats = _ols_features(data) if strategy == "kmeans-lite" else None
    for _ in range(100):
        if strategy == "random":
            lab = rng.integers(K, size=n)
        elif strategy == "kmeans-lite":
            _, lab = kmeans2(feats, K, minit="++", seed=rng)
        else:
            raise ValueError(f"unknown initialization strategy {strategy!r}")
        if np.bincount(lab, minlength=K).min() > 0:
            return Responsibilities.from_labels(lab, K)
    raise RuntimeError("could not draw an initialization without empty clusters")


# ---------------------------------------------------------------------------
# EM driver

BetaStep = Callable[[WorkingProblem, np.ndarray, np.ndarray, np.ndarray], tuple]


def block_dimensions(problem: WorkingProblem, config: PenaltyConfig) -> np.ndarray:
    """Effective dimension of each (j, k) block, shape (p, K).

    ``trace((G + S)^+ G)`` with ``G`` the block cross-product matrix and ``S``
    the Hessian of the quadratic part of the penalty.  Blocks with no
    quadratic shrinkage count their full length ``L``.
    """
    p, K, L = problem.p, problem.K, problem.L
    if config.kind == "rp":
        lam = config.lam_scalar
        if lam == 0.0:
            return np.full((p, K), float(L))
        G = problem.block_gram
        M = G + 2.0 * lam * problem.roughness_alpha
        return np.einsum("jkll->jk", np.linalg.pinv(M, hermitian=True) @ G)
    shrink = 2.0 * (1.0 - config.rho) * (config.lambdas(K) if not config.grouped else np.full(K, config.lam_scalar))
    eig = np.maximum(problem.block_eigenvalues, 0.0)
    out = np.full((p, K), float(L))
    for k in range(K):
        if shrink[k] > 0.0:
            out[:, k] = np.sum(eig[:, k] / (eig[:, k] + shrink[k]), axis=-1)
    return out


def parameter_count(block_dims: np.ndarray, nonzero: np.ndarray, K: int) -> float:
    return float(np.sum(block_dims[nonzero])) + (K - 1) + K


def _reseed(omega: np.ndarray, k: int, sub_ll: np.ndarray, n_times: np.ndarray) -> np.ndarray:
    n, K = omega.shape
    fit_quality = np.max(sub_ll, axis=1) / n_times
    m = max(2, n // (2 * K))
    worst = np.argsort(fit_quality, kind="stable")[:m]
    omega = omega.copy()
    omega[worst] = 0.0
    omega[worst, k] = 1.0
    return omega


def run_em(
    data: FunctionalDataset,
    basis: SplineBasis,
    K: int,
    config: PenaltyConfig,
    omega0: Responsibilities,
    beta_step: BetaStep,
    stop: StopSpec = StopSpec(),
    estep: str = "product",
    seed: int = 0,
    H=None,
    converge_on_config: bool = False,
) -> FitResult:
    """Alternate the given coefficient step with the weight/variance updates and E-step.

    ``beta_step(problem, alpha, omega, sigma2)`` returns ``(alpha, config)``;
    the returned config (possibly with a new lambda) defines the penalty in
    the recorded objective.
    """
    if estep not in ESTEP_MODES:
        raise ValueError(f"estep must be one of {ESTEP_MODES}")
    if H is None:
        H = alpha_design(data, basis)
    n = data.n
    omega = np.asarray(omega0.omega, dtype=float)
    if omega.shape != (n, K):
        raise ValueError("initial responsibilities do not match (n, K)")
    sigma2 = np.full(K, max(float(np.var(data.y)), SIGMA2_FLOOR))
    alpha = np.zeros((data.p, K, basis.L))
    trace: list = []
    lambda_trace: list = []
    restarts: list = []
    reseeds = np.zeros(K, dtype=int)
    degenerate = False
    converged = False
    cfg = config
    prev_cfg = None
    reason = ""
    it = 0
    for it in range(1, stop.max_iter + 1):
        prob = assemble_problem(data, basis, omega, sigma2, H=H)
        alpha, cfg = beta_step(prob, alpha, omega, sigma2)
        mu = prob.fitted(alpha)
        pi = _update_pi(omega)
        sigma2 = _update_sigma2(data, omega, mu, sigma2)
        sub_ll = subject_logdens(data, mu, sigma2, "product")
        if K > 1 and _overparameterized(data, omega, alpha, block_dimensions(prob, cfg), cfg.kind == "rp"):
            degenerate = True
            reason = f"a cluster has no more effective observations than coefficients at iteration {it}"
        obj = _mixture_loglik(sub_ll, pi) - penalty_value(cfg, alpha, basis.roughness_alpha) / prob.loss_scale
        trace.append(obj)
        lambda_trace.append(cfg.lam_scalar)
        if reason:
            break
        if len(trace) > 1 and (not restarts or restarts[-1] != len(trace) - 1):
            small = abs(trace[-1] - trace[-2]) <= stop.tol * (1.0 + abs(trace[-1]))
            if small and (not converge_on_config or cfg == prev_cfg):
                converged = True
                break
        prev_cfg = cfg
        e_ll = sub_ll if estep == "product" else subject_logdens(data, mu, sigma2, estep)
        omega = _responsibilities(e_ll, pi).omega
        mass = omega.sum(axis=0)
        for k in np.flatnonzero(mass < EMPTY_FRACTION * n):
            if K == 1:
                break
            if reseeds[k] >= 1:
                degenerate = True
                reason = reason or f"cluster {k} emptied twice"
                continue
            reseeds[k] += 1
            log.debug("cluster %d emptied at iteration %d; re-seeding", k, it)
            omega = _reseed(omega, k, sub_ll, data.n_times)
            restarts.append(len(trace))
    params = MixtureParams(basis.from_alpha(alpha), sigma2, pi)
    final = _responsibilities(subject_logdens(data, mu, sigma2, estep), pi)
    res = _finalize(
        data, basis, H, params, final, cfg, trace, lambda_trace, restarts, degenerate,
        converged, it, seed, estep,
    )
    if reason:
        res.extra["degenerate_reason"] = reason
    return res


def _overparameterized(data: FunctionalDataset, omega: np.ndarray, alpha: np.ndarray, dims: np.ndarray,
                       dense: bool = False) -> bool:
    """Whether some cluster has no more effective observations than effective coefficients."""
    eff = data.n_times @ omega
    nonzero = np.ones(alpha.shape[:2], dtype=bool) if dense else np.any(alpha != 0.0, axis=2)
    npar = np.sum(np.where(nonzero, dims, 0.0), axis=0)
    return bool(np.any((npar > 0) & (eff <= npar)))


def _finalize(data, basis, H, params, omega, cfg, trace, lambda_trace, restarts, degenerate,
              converged, iterations, seed, estep) -> FitResult:
    alpha = basis.to_alpha(params.b)
    prob = assemble_problem(data, basis, omega, params.sigma2, H=H, mode="residual")
    dims = block_dimensions(prob, cfg)
    nonzero = np.any(alpha != 0.0, axis=2)
    if cfg.kind == "rp":
        nonzero = np.ones_like(nonzero)
    df = parameter_count(dims, nonzero, params.K)
    ll = composite_loglik(params, basis, data, H)
    N = data.n_obs
    return FitResult(
        params=params,
        omega=omega,
        labels=omega.labels,
        support=[int(j) for j in np.flatnonzero(nonzero.any(axis=1))],
        support_blocks=nonzero,
        trace=[float(v) for v in trace],
        loglik=ll,
        df=df,
        aic=-2.0 * ll + 2.0 * df,
        bic=-2.0 * ll + df * math.log(N),
        config=cfg,
        basis=basis,
        converged=converged,
        iterations=iterations,
        seed=seed,
        n_obs=N,
        block_dims=dims,
        lambda_trace=[float(v) for v in lambda_trace],
        restarts=list(restarts),
        degenerate=degenerate,
        estep=estep,
    )


def _fixed_beta_step(config: PenaltyConfig, stop: StopSpec) -> BetaStep:
    def step(prob, alpha, omega, sigma2):
        res = solve(prob, config, alpha, stop.solver_tol, stop.max_sweeps)
        return res.alpha, config

    return step


def _initial(data, K, init: InitSpec, start: int) -> Responsibilities:
    labels = None if init.labels is None else np.asarray(init.labels)
    return initialize(data, K, init.strategy, init.seed + 1000 * start, labels)


def _final_objective(res: FitResult) -> float:
    return res.trace[-1]


def best_of_starts(
    run: Callable[[Responsibilities, int], FitResult], data, K, init: InitSpec, score: Callable = _final_objective
) -> FitResult:
    """Run ``run`` from each start and keep the best one.

    Non-degenerate fits are preferred; among them the highest ``score``
    (final penalized objective by default) wins, the earliest start on ties.
    """
    n_starts = 1 if init.strategy == "labels" or K == 1 else max(1, init.n_starts)
    best = None
    for s in range(n_starts):
        res = run(_initial(data, K, init, s), init.seed + 1000 * s)
        key = (not res.degenerate, score(res))
        if best is None or key > best[0]:
            best = (key, res)
    best = best[1]
    best.extra["n_starts"] = n_starts
    return best


def fit(
    data: FunctionalDataset,
    K: int,
    config: PenaltyConfig,
    init: InitSpec = InitSpec(),
    stop: StopSpec = StopSpec(),
    estep: str = "product",
    basis: SplineBasis | None = None,
) -> FitResult:
    """Penalized EM at a fixed penalty configuration."""
    if K < 1:
        raise ValueError("K must be at least 1")
    if basis is None:
        basis = build_basis(data.time_union, config.r)
    H = alpha_design(data, basis)
    step = _fixed_beta_step(config, stop)
    return best_of_starts(
        lambda om, seed: run_em(data, basis, K, config, om, step, stop, estep, seed, H), data, K, init
    )


# ---------------------------------------------------------------------------
# wild bootstrap


@dataclass
class BootstrapBands:
    t: np.ndarray
    estimate: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float
    B: int
    dropped: int
    method: str = "wild bootstrap, Rademacher subject multipliers, labels and support fixed"


def bootstrap_bands(
    fit_result: FitResult,
    data: FunctionalDataset,
    B: int = 200,
    level: float = 0.05,
    seed: int = 0,
    t=None,
    stop: StopSpec = StopSpec(),
    max_drop: float = 0.2,
) -> BootstrapBands:
    """Pointwise ``(level/2, 1 - level/2)`` bands for every coefficient function.

    Each replicate flips the sign of every subject's residual vector with
    probability 1/2, rebuilds responses under the fitted model, and refits
    the coefficients with labels, variances, lambda and support held fixed.
    """
    if B < 1:
        raise ValueError("B must be positive")
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    basis = fit_result.basis
    t = np.linspace(0.0, 1.0, 101) if t is None else np.asarray(t, dtype=float)
    K = fit_result.K
    H = alpha_design(data, basis)
    omega = Responsibilities.from_labels(fit_result.labels, K)
    prob = assemble_problem(data, basis, omega, fit_result.params.sigma2, H=H)
    alpha_hat = fit_result.alpha
    own = fit_result.labels[data.subject_index]
    mu = prob.fitted(alpha_hat)[own, np.arange(data.n_obs)]
    resid = data.y - mu
    mask = fit_result.support_blocks
    rng = np.random.default_rng(seed)
    draws = []
    dropped = 0
    for _ in range(B):
        v = rng.choice([-1.0, 1.0], size=data.n)
        prob_b = prob.with_response(mu + v[data.subject_index] * resid)
        res = solve(prob_b, fit_result.config, alpha_hat, stop.solver_tol, stop.max_sweeps, active=mask)
        if not res.converged:
            dropped += 1
            continue
        draws.append(basis.evaluate(basis.from_alpha(res.alpha), t))
    if dropped > max_drop * B:
        raise RuntimeError(f"{dropped} of {B} bootstrap refits failed to converge")
    draws = np.stack(draws)
    lower = np.quantile(draws, level / 2.0, axis=0)
    upper = np.quantile(draws, 1.0 - level / 2.0, axis=0)
    return BootstrapBands(
        t=t, estimate=fit_result.curves(t), lower=lower, upper=upper, level=level, B=B, dropped=dropped
    )
