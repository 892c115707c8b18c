"""SCAD-type group penalties and their proximal map.

Penalties act on coefficient blocks in alpha coordinates (see
:mod:`fmflcm.fda`), where a block's Euclidean norm is the mixed
magnitude/smoothness norm of the coefficient function.

Kinds
-----
``fs``       sum over (j, k) of SCAD(||alpha_jk||; lambda_k)
``fs-net``   sum over (j, k) of rho*SCAD(||alpha_jk||; lambda_k) + (1-rho)*lambda_k*||alpha_jk||^2
``fgs-net``  sum over j of rho*SCAD(||alpha_j.||; lambda) + (1-rho)*lambda*||alpha_j.||^2
``rp``       lambda * sum over (j, k) of ||beta_jk''||^2 (no sparsity)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from numba import njit

KINDS = ("fs", "fs-net", "fgs-net", "rp")
DEFAULT_GAMMA = 3.7

_ALIASES = {
    "fs": "fs",
    "fs-net": "fs-net",
    "fsnet": "fs-net",
    "fs_net": "fs-net",
    "fgs-net": "fgs-net",
    "fgsnet": "fgs-net",
    "fgs_net": "fgs-net",
    "rp": "rp",
}


def normalize_kind(kind: str) -> str:
    try:
        return _ALIASES[kind.strip().lower()]
    except KeyError:
        raise ValueError(f"unknown penalty kind {kind!r}; expected one of {KINDS}") from None


@dataclass(frozen=True)
class PenaltyConfig:
    kind: str = "fgs-net"
    lam: float | tuple = 0.0
    rho: float = 1.0
    gamma: float = DEFAULT_GAMMA
    r: float = 0.0

    def __post_init__(self):
        kind = normalize_kind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind == "fs":
            object.__setattr__(self, "rho", 1.0)
        lam = self.lam
        if np.ndim(lam) > 0:
            if kind in ("fgs-net", "rp"):
                raise ValueError(f"{kind} takes a single lambda")
            lam = tuple(float(v) for v in np.ravel(lam))
            if any(v < 0 for v in lam):
                raise ValueError("lambda must be nonnegative")
        else:
            lam = float(lam)
            if lam < 0:
                raise ValueError("lambda must be nonnegative")
        object.__setattr__(self, "lam", lam)
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        if self.gamma <= 2.0:
            raise ValueError("gamma must exceed 2")
        if self.r < 0:
            raise ValueError("r must be nonnegative")

    def lambdas(self, K: int) -> np.ndarray:
        """Per-cluster lambdas; a scalar is shared by every cluster."""
        if isinstance(self.lam, tuple):
            if len(self.lam) != K:
                raise ValueError(f"expected {K} per-cluster lambdas, got {len(self.lam)}")
            return np.array(self.lam, dtype=float)
        return np.full(K, self.lam)

    @property
    def lam_scalar(self) -> float:
        return float(max(self.lam)) if isinstance(self.lam, tuple) else self.lam

    def with_lambda(self, lam) -> "PenaltyConfig":
        return replace(self, lam=lam)

    @property
    def grouped(self) -> bool:
        return self.kind == "fgs-net"


def scad(u, lam: float, gamma: float = DEFAULT_GAMMA):
    """SCAD penalty value for ``u >= 0``."""
    u = np.asarray(u, dtype=float)
    if np.any(u < 0):
        raise ValueError("SCAD is defined for nonnegative arguments")
    mid = -(u * u - 2.0 * gamma * lam * u + lam * lam) / (2.0 * (gamma - 1.0))
    out = np.where(
        u <= lam, lam * u, np.where(u < gamma * lam, mid, 0.5 * (gamma + 1.0) * lam * lam)
    )
    return float(out) if out.ndim == 0 else out


def scad_derivative(u, lam: float, gamma: float = DEFAULT_GAMMA):
    """Right derivative of SCAD in ``u``."""
    u = np.asarray(u, dtype=float)
    out = np.where(
        u <= lam, lam, np.where(u < gamma * lam, (gamma * lam - u) / (gamma - 1.0), 0.0)
    )
    return float(out) if out.ndim == 0 else out


def _block_norms(config: PenaltyConfig, alpha: np.ndarray) -> np.ndarray:
    if config.grouped:
        return np.sqrt(np.sum(alpha * alpha, axis=(1, 2)))
    return np.sqrt(np.sum(alpha * alpha, axis=2))


def penalty_value(config: PenaltyConfig, alpha, roughness_alpha=None) -> float:
    """Total penalty for ``alpha`` of shape (p, K, L).

    ``roughness_alpha`` (the roughness form in alpha coordinates) is needed
    only for the ``rp`` kind.
    """
    alpha = np.asarray(alpha, dtype=float)
    if alpha.ndim != 3:
        raise ValueError("alpha must have shape (p, K, L)")
    p, K, L = alpha.shape
    if config.kind == "rp":
        if roughness_alpha is None:
            raise ValueError("rp penalty needs the roughness form")
        if roughness_alpha.shape != (L, L):
            raise ValueError("roughness form does not match block length")
        quad = np.einsum("jkl,lm,jkm->", alpha, roughness_alpha, alpha)
        return float(config.lam_scalar * quad)
    norms = _block_norms(config, alpha)
    rho, gamma = config.rho, config.gamma
    if config.grouped:
        lam = config.lam_scalar
        return float(np.sum(rho * scad(norms, lam, gamma) + (1.0 - rho) * lam * norms**2))
    lams = config.lambdas(K)
    total = 0.0
    for k in range(K):
        nk = norms[:, k]
        total += np.sum(rho * scad(nk, lams[k], gamma) + (1.0 - rho) * lams[k] * nk**2)
    return float(total)


@njit(cache=True)
def _prox_objective(s, z, nu, lam, rho, gamma):
    gl = gamma * lam
    if s <= lam:
        pen = lam * s
    elif s < gl:
        pen = -(s * s - 2.0 * gl * s + lam * lam) / (2.0 * (gamma - 1.0))
    else:
        pen = 0.5 * (gamma + 1.0) * lam * lam
    return 0.5 * nu * (s - z) ** 2 + rho * pen + (1.0 - rho) * lam * s * s


@njit(cache=True)
def scalar_prox(z, nu, lam, rho, gamma):
    """Minimize ``nu/2 (s - z)^2 + rho*SCAD(s) + (1-rho)*lam*s^2`` over ``s >= 0`` for ``z >= 0``.

    The objective is quadratic on each SCAD piece, so the minimizer is the
    best of the per-piece stationary points clipped to their pieces.
    """
    if z <= 0.0:
        return 0.0
    if lam == 0.0:
        return z
    c = (1.0 - rho) * lam
    gl = gamma * lam
    best_s = 0.0
    best_v = _prox_objective(0.0, z, nu, lam, rho, gamma)
    cands = np.empty(6)
    cands[0] = lam
    cands[1] = gl
    cands[2] = min(max((nu * z - rho * lam) / (nu + 2.0 * c), 0.0), lam)
    curv = nu - rho / (gamma - 1.0) + 2.0 * c
    ncand = 3
    if curv > 0.0:
        cands[ncand] = min(max((nu * z - rho * gl / (gamma - 1.0)) / curv, lam), gl)
        ncand += 1
    cands[ncand] = max(nu * z / (nu + 2.0 * c), gl)
    ncand += 1
    for i in range(ncand):
        v = _prox_objective(cands[i], z, nu, lam, rho, gamma)
        if v < best_v - 1e-15 * max(1.0, abs(best_v)):
            best_s = cands[i]
            best_v = v
    return best_s


def group_prox(z, nu: float, lam: float, rho: float, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    """Proximal map of the SCAD-plus-ridge group penalty with curvature ``nu``.

    Returns ``argmin_a nu/2 ||a - z||^2 + rho*SCAD(||a||; lam) + (1-rho)*lam*||a||^2``,
    which is a nonnegative rescaling of ``z``.
    """
    if nu <= 0:
        raise ValueError("nu must be positive")
    z = np.asarray(z, dtype=float)
    norm = math.sqrt(float(np.dot(z.ravel(), z.ravel())))
    if norm == 0.0:
        return np.zeros_like(z)
    s = scalar_prox(norm, float(nu), float(lam), float(rho), float(gamma))
    return z * (s / norm)
