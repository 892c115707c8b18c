"""Group coordinate descent for the penalized weighted least-squares M-step.

The M-step for the coefficient functions minimizes, over ``alpha`` (p, K, L),

    0.5 * sum_k sum_obs w_k[obs] * (y[obs] - sum_j h_j[obs] @ alpha[j, k])**2 + penalty(alpha)

with ``w_k[obs] = c * omega[subject(obs), k] / sigma2[k]`` and ``c`` a loss
scale (one over the number of observations by default).  This is the negated
expected complete-data log-likelihood up to terms free of ``alpha``.  Each
block (or covariate group) is replaced by its exact minimizer with the
others held fixed, found in the eigenbasis of the block cross-product
matrix; purely quadratic blocks are solved by least squares.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from .fda import FunctionalDataset, SplineBasis
from .penalty import PenaltyConfig, penalty_value, scad_derivative

GRAM_MAX_COLUMNS = 600
DEFAULT_TOL = 1e-6
DEFAULT_MAX_SWEEPS = 500
POLISH_EVERY = 10
POLISH_MAX_COLUMNS = 1200

_KIND_CODE = {
    "fs": _kernels.KIND_BLOCK,
    "fs-net": _kernels.KIND_BLOCK,
    "fgs-net": _kernels.KIND_GROUP,
    "rp": _kernels.KIND_RP,
}


def alpha_design(data: FunctionalDataset, basis: SplineBasis) -> np.ndarray:
    """Per-covariate design blocks ``h_j(t) = X_j(t) * D^-T Psi(t)``, shape (p, N, L)."""
    Psi = basis.design(data.t) @ basis.D_inv
    return np.ascontiguousarray(np.einsum("nj,nl->jnl", data.x, Psi))


@dataclass
class WorkingProblem:
    H: np.ndarray
    y: np.ndarray
    weights: np.ndarray
    block_gram: np.ndarray
    nu: np.ndarray
    roughness_alpha: np.ndarray
    mode: str
    loss_scale: float = 1.0
    gram_cols: np.ndarray | None = field(default=None, repr=False)
    gram_rhs: np.ndarray | None = field(default=None, repr=False)
    _eig: np.ndarray | None = field(default=None, repr=False)
    _evec: np.ndarray | None = field(default=None, repr=False)

    @property
    def p(self) -> int:
        return self.H.shape[0]

    @property
    def N(self) -> int:
        return self.H.shape[1]

    @property
    def L(self) -> int:
        return self.H.shape[2]

    @property
    def K(self) -> int:
        return self.weights.shape[0]

    def fitted(self, alpha: np.ndarray) -> np.ndarray:
        """Cluster-wise fitted values, shape (K, N)."""
        return np.einsum("jnl,jkl->kn", self.H, alpha)

    def smooth_gradient(self, alpha: np.ndarray) -> np.ndarray:
        """Gradient of the weighted loss with respect to alpha, shape (p, K, L)."""
        resid = self.y[None, :] - self.fitted(alpha)
        return -np.einsum("jnl,kn->jkl", self.H, self.weights * resid)

    def loss(self, alpha: np.ndarray) -> float:
        resid = self.y[None, :] - self.fitted(alpha)
        return float(0.5 * np.sum(self.weights * resid * resid))

    def with_response(self, y: np.ndarray) -> "WorkingProblem":
        """Same weights and design with a new response vector."""
        y = np.asarray(y, dtype=float)
        if y.shape != self.y.shape:
            raise ValueError("response has the wrong length")
        out = replace(self, y=y)
        if self.mode == "gram":
            out.gram_rhs = np.einsum("jnl,kn->kjl", self.H, self.weights * y[None, :]).reshape(self.K, -1)
        return out

    def _eigh(self):
        if self._eig is None or self._evec is None:
            self._eig, self._evec = np.linalg.eigh(self.block_gram)
        return self._eig, self._evec

    @property
    def block_eigenvalues(self) -> np.ndarray:
        """Eigenvalues of every block cross-product, ascending, shape (p, K, L)."""
        return self._eigh()[0]

    @property
    def block_eigenvectors(self) -> np.ndarray:
        return self._eigh()[1]


def assemble_problem(
    data: FunctionalDataset,
    basis: SplineBasis,
    omega,
    sigma2,
    H: np.ndarray | None = None,
    mode: str = "auto",
    loss_scale: float | None = None,
) -> WorkingProblem:
    """Weighted least-squares pieces for one M-step.

    The weighted loss is multiplied by ``loss_scale`` (default one over the
    number of observations), so penalties act on a per-observation loss.
    """
    omega = np.asarray(getattr(omega, "omega", omega), dtype=float)
    sigma2 = np.asarray(sigma2, dtype=float).ravel()
    if omega.shape != (data.n, sigma2.size):
        raise ValueError(
            f"omega has shape {omega.shape}, expected ({data.n}, {sigma2.size})"
        )
    if H is None:
        H = alpha_design(data, basis)
    if H.shape != (data.p, data.n_obs, basis.L):
        raise ValueError("design does not match data and basis")
    y = data.y
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(H))):
        raise ValueError("non-finite values in the working problem")
    if loss_scale is None:
        loss_scale = 1.0 / data.n_obs
    if not loss_scale > 0:
        raise ValueError("loss_scale must be positive")
    W = np.ascontiguousarray((omega[data.subject_index] / sigma2[None, :]).T * loss_scale)
    Gb = np.einsum("jnl,kn,jnm->jklm", H, W, H, optimize=True)
    Gb = 0.5 * (Gb + np.swapaxes(Gb, -1, -2))
    eig, evec = np.linalg.eigh(Gb)
    nu = np.maximum(eig[..., -1], 0.0)
    p, N, L = H.shape
    P = p * L
    if mode == "auto":
        mode = "gram" if P <= GRAM_MAX_COLUMNS else "residual"
    prob = WorkingProblem(
        H=H, y=y, weights=W, block_gram=np.ascontiguousarray(Gb), nu=nu,
        roughness_alpha=np.ascontiguousarray(basis.roughness_alpha), mode=mode,
        loss_scale=float(loss_scale), _eig=eig, _evec=np.ascontiguousarray(evec),
    )
    if mode == "gram":
        H2 = H.transpose(1, 0, 2).reshape(N, P)
        K = W.shape[0]
        cols = np.empty((K, p, P, L))
        rhs = np.empty((K, P))
        for k in range(K):
            WH = H2 * W[k][:, None]
            Gk = H2.T @ WH
            cols[k] = Gk.reshape(P, p, L).transpose(1, 0, 2)
            rhs[k] = WH.T @ y
        prob.gram_cols = cols
        prob.gram_rhs = rhs
    elif mode != "residual":
        raise ValueError(f"unknown solver mode {mode!r}")
    return prob


@dataclass
class SolveResult:
    alpha: np.ndarray
    converged: bool
    sweeps: int
    max_change: float


def objective(problem: WorkingProblem, config: PenaltyConfig, alpha) -> float:
    """Weighted loss plus penalty (the quantity the solver decreases)."""
    alpha = np.asarray(alpha, dtype=float)
    return problem.loss(alpha) + penalty_value(config, alpha, problem.roughness_alpha)


def _lambda_vector(config: PenaltyConfig, K: int) -> np.ndarray:
    if config.kind in ("fgs-net", "rp"):
        return np.full(K, config.lam_scalar)
    return config.lambdas(K)


def solve(
    problem: WorkingProblem,
    config: PenaltyConfig,
    alpha0=None,
    tol: float = DEFAULT_TOL,
    max_sweeps: int = DEFAULT_MAX_SWEEPS,
    active: np.ndarray | None = None,
) -> SolveResult:
    """Cyclic group coordinate descent from ``alpha0``.

    Groups listed as inactive in ``active`` (boolean, (p,)) are held at zero;
    this is how support-restricted refits are run.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    p, K, L = problem.p, problem.K, problem.L
    alpha = np.zeros((p, K, L)) if alpha0 is None else np.array(alpha0, dtype=float)
    if alpha.shape != (p, K, L):
        raise ValueError(f"alpha0 has shape {alpha.shape}, expected {(p, K, L)}")
    if not np.all(np.isfinite(alpha)):
        raise ValueError("non-finite warm start")
    kind = _KIND_CODE[config.kind]
    lams = _lambda_vector(config, K)
    rho = float(config.rho) if config.kind != "rp" else 0.0
    gamma = float(config.gamma)
    S = problem.roughness_alpha if config.kind == "rp" else np.eye(L)
    nu = problem.nu
    if active is not None:
        active = np.asarray(active, dtype=bool)
        nu = nu.copy()
        nu[~active] = 0.0
        alpha[~active] = 0.0
    E = np.ascontiguousarray(problem.block_eigenvalues)
    V = problem.block_eigenvectors
    if problem.mode == "gram":
        cols = problem.gram_cols
        g = np.einsum("kjPl,jkl->kP", cols, alpha) - problem.gram_rhs

        def sweep(full):
            return _kernels.sweep_gram(cols, g, alpha, E, V, nu, lams, rho, gamma, kind, S, full)
    else:
        R = np.ascontiguousarray(problem.y[None, :] - problem.fitted(alpha))

        def sweep(full):
            return _kernels.sweep_residual(
                problem.H, problem.weights, R, alpha, problem.block_gram, E, V, nu, lams, rho,
                gamma, kind, S, full,
            )

    def refresh():
        if problem.mode == "gram":
            g[:] = np.einsum("kjPl,jkl->kP", cols, alpha) - problem.gram_rhs
        else:
            R[:] = problem.y[None, :] - problem.fitted(alpha)

    sweeps = 0
    converged = False
    change = np.inf
    full = True
    failed = None
    while sweeps < max_sweeps:
        change = sweep(full)
        sweeps += 1
        if change < tol:
            if full:
                converged = True
                break
            full = True
            continue
        full = False
        if sweeps % POLISH_EVERY == 2:
            key = np.any(alpha != 0.0, axis=2).tobytes()
            if key != failed:
                new = _polish(problem, config, alpha, lams, rho, gamma)
                if new is None:
                    failed = key
                else:
                    alpha[...] = new
                    refresh()
    if not np.all(np.isfinite(alpha)):
        raise FloatingPointError("solver produced non-finite coefficients")
    return SolveResult(alpha=alpha, converged=converged, sweeps=sweeps, max_change=float(change))


def _polish(problem: WorkingProblem, config: PenaltyConfig, alpha, lams, rho, gamma):
    """Jointly re-solve the active blocks when the penalty is quadratic on them.

    That holds for the quadratic kinds and, for SCAD kinds, when every
    active block (or group) lies on the flat part of SCAD.  Returns the new
    coefficients if they lower the objective, else None.
    """
    p, K, L = alpha.shape
    nz = np.any(alpha != 0.0, axis=2)
    quad = config.kind == "rp" or rho == 0.0
    if not quad:
        if config.grouped:
            norms = np.sqrt(np.sum(alpha * alpha, axis=(1, 2)))
            on = norms[nz.any(axis=1)]
            if np.any(on < gamma * lams[0]):
                return None
        else:
            norms = np.sqrt(np.sum(alpha * alpha, axis=2))
            if np.any(norms[nz] < gamma * np.broadcast_to(lams, (p, K))[nz]):
                return None
    new = alpha.copy()
    P = p * L
    for k in range(K):
        # blocks without data keep their current values
        js = np.flatnonzero(nz[:, k] & (problem.nu[:, k] > 0.0))
        if js.size == 0:
            continue
        m = js.size * L
        if m > POLISH_MAX_COLUMNS:
            return None
        idx = (js[:, None] * L + np.arange(L)[None, :]).ravel()
        if problem.mode == "gram":
            Gk = problem.gram_cols[k].transpose(1, 0, 2).reshape(P, P)
            GA = Gk[np.ix_(idx, idx)]
            rhs = problem.gram_rhs[k][idx]
        else:
            HA = problem.H[js].transpose(1, 0, 2).reshape(problem.N, m)
            WH = HA * problem.weights[k][:, None]
            GA = HA.T @ WH
            rhs = WH.T @ problem.y
        if config.kind == "rp":
            pen = 2.0 * lams[k] * np.kron(np.eye(js.size), problem.roughness_alpha)
        else:
            pen = 2.0 * (1.0 - rho) * lams[k] * np.eye(m)
        x = np.linalg.lstsq(GA + pen, rhs, rcond=1e-12)[0]
        new[js, k] = x.reshape(js.size, L)
    if not np.all(np.isfinite(new)):
        return None
    if objective(problem, config, new) < objective(problem, config, alpha):
        return new
    return None


def _group_view(config: PenaltyConfig, arr: np.ndarray):
    """Iterate (key, values, lambda) over the penalty's groups."""
    p, K, L = arr.shape
    if config.grouped:
        lam = config.lam_scalar
        for j in range(p):
            yield (j,), arr[j].ravel(), lam
    else:
        lams = _lambda_vector(config, K)
        for j in range(p):
            for k in range(K):
                yield (j, k), arr[j, k], lams[k]


def kkt_residual(problem: WorkingProblem, config: PenaltyConfig, alpha) -> float:
    """Largest stationarity violation over groups (0 at an exact stationary point)."""
    alpha = np.asarray(alpha, dtype=float)
    grad = problem.smooth_gradient(alpha)
    if config.kind == "rp":
        lam = config.lam_scalar
        g = grad + 2.0 * lam * np.einsum("lm,jkm->jkl", problem.roughness_alpha, alpha)
        return float(np.max(np.linalg.norm(g, axis=2)))
    rho, gamma = config.rho, config.gamma
    worst = 0.0
    grads = dict((key, g) for key, g, _ in _group_view(config, grad))
    for key, a, lam in _group_view(config, alpha):
        g = grads[key]
        na = float(np.linalg.norm(a))
        if na == 0.0:
            viol = max(0.0, float(np.linalg.norm(g)) - rho * lam)
        else:
            pen = rho * scad_derivative(na, lam, gamma) * a / na + 2.0 * (1.0 - rho) * lam * a
            viol = float(np.linalg.norm(g + pen))
        worst = max(worst, viol)
    return worst
