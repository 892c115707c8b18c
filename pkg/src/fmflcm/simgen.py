"""Synthetic mixtures of functional concurrent regressions with a known truth."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np
from scipy.integrate import quad

from .fda import FunctionalDataset

N_ACTIVE = 6
N_CLUSTERS_MAX = 3
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(64)
_QT = 0.5 * (_GL_NODES + 1.0)
_QW = 0.5 * _GL_WEIGHTS


@dataclass(frozen=True)
class SimConfig:
    n: int = 180
    p: int = 10
    K: int = 3
    alpha: float = 0.4
    snr: float = 12.0
    S: int = 10
    pi: tuple | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be positive")
        if self.p < N_ACTIVE:
            raise ValueError(f"p must be at least {N_ACTIVE}")
        if not 1 <= self.K <= N_CLUSTERS_MAX:
            raise ValueError(f"K must lie in 1..{N_CLUSTERS_MAX}")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("alpha must lie in [0, 1)")
        if self.snr <= 0:
            raise ValueError("snr must be positive")
        if self.S < 2:
            raise ValueError("need at least two time points")
        if self.pi is not None:
            pi = tuple(float(v) for v in self.pi)
            if len(pi) != self.K or min(pi) < 0 or abs(sum(pi) - 1.0) > 1e-12:
                raise ValueError("pi must be K nonnegative weights summing to 1")
            object.__setattr__(self, "pi", pi)

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.K, 1.0 / self.K) if self.pi is None else np.array(self.pi)

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.S)


def fourier(t) -> np.ndarray:
    """Orthonormal sin/cos pairs at frequencies 1 and 2, shape (4, len(t))."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    r2 = np.sqrt(2.0)
    w = 2.0 * np.pi * t
    return np.stack([r2 * np.sin(w), r2 * np.cos(w), r2 * np.sin(2 * w), r2 * np.cos(2 * w)])


def _f11(t):
    return np.sin(np.pi * t / 2 + 3 * np.pi / 2) - t - 0.5


def _f12(t):
    return (np.cos(2 * np.pi * t) - 1.0) ** 2


def _f21(t):
    return np.sin(2 * np.pi * t) - t + 0.5


# raw shapes, indexed [function group][cluster]
RAW_FUNCTIONS = (
    (_f11, _f12, lambda t: -_f11(t) + 1.0),
    (_f21, lambda t: np.sin(np.pi * t / 2 + np.pi), lambda t: -_f21(t) - 0.5),
    (lambda t: -np.sin(np.pi * t / 2 + 3 * np.pi / 2) - t - 0.5, lambda t: -_f12(t), lambda t: _f11(t) + t + 0.5),
)


@lru_cache(maxsize=None)
def _norms() -> np.ndarray:
    out = np.empty((3, 3))
    for a in range(3):
        for k in range(3):
            f = RAW_FUNCTIONS[a][k]
            out[a, k] = np.sqrt(quad(lambda t: float(f(t)) ** 2, 0.0, 1.0, epsabs=1e-14, epsrel=1e-13)[0])
    return out


def true_coefficients(t, p: int = N_ACTIVE, K: int = 3) -> np.ndarray:
    """True coefficient functions on ``t``, shape (p, K, len(t)).

    Covariates 1-6 carry unit-norm functions in pairs; the rest are zero.
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if p < N_ACTIVE:
        raise ValueError(f"p must be at least {N_ACTIVE}")
    norms = _norms()
    beta = np.zeros((p, K, t.size))
    for j in range(N_ACTIVE):
        a = j // 2
        for k in range(K):
            beta[j, k] = RAW_FUNCTIONS[a][k](t) / norms[a, k]
    return beta


def loading_covariance(p: int, alpha: float, l: int) -> np.ndarray:
    idx = np.arange(p)
    return alpha ** np.abs(idx[:, None] - idx[None, :]) / l**2


def generate_covariates(config: SimConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Fourier loadings, shape (n, 4, p); covariate i is ``theta[i].T @ fourier(t)``."""
    rng = np.random.default_rng(config.seed) if rng is None else rng
    chol = np.linalg.cholesky(loading_covariance(config.p, config.alpha, 1))
    z = rng.standard_normal((config.n, 4, config.p))
    scale = 1.0 / np.arange(1, 5)
    return np.einsum("jm,ilm->ilj", chol, z) * scale[None, :, None]


def covariates_at(theta: np.ndarray, t) -> np.ndarray:
    """Evaluate covariates, shape (n, len(t), p)."""
    return np.einsum("ilj,ls->isj", theta, fourier(t))


@dataclass
class SimTruth:
    labels: np.ndarray
    sigma2: np.ndarray
    active: list
    config: dict
    theta: np.ndarray = field(repr=False)

    def beta(self, t) -> np.ndarray:
        return true_coefficients(t, self.config["p"], self.config["K"])

    def to_dict(self) -> dict:
        return {
            "labels": [int(v) for v in self.labels],
            "sigma2": [float(v) for v in self.sigma2],
            "active": list(self.active),
            "config": dict(self.config),
        }


def noise_variance(theta: np.ndarray, labels: np.ndarray, snr: float, K: int) -> float:
    """Mean integrated squared signal over subjects divided by the SNR."""
    X = covariates_at(theta, _QT)
    B = true_coefficients(_QT, theta.shape[2], K)
    signal = np.einsum("isj,jis->is", X, B[:, labels, :])
    energy = float(np.mean(signal**2 @ _QW))
    if energy <= 0.0:
        raise ValueError("signal is identically zero; noise variance undefined")
    return energy / snr


def exp_covariance(t, scale: float) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    return scale * np.exp(-np.abs(t[:, None] - t[None, :]))


def generate_dataset(config: SimConfig) -> tuple:
    """Draw a dataset; returns ``(FunctionalDataset, SimTruth)``."""
    rng = np.random.default_rng(config.seed)
    labels = rng.choice(config.K, size=config.n, p=config.weights)
    theta = generate_covariates(config, rng)
    sigma2 = noise_variance(theta, labels, config.snr, config.K)
    t = config.times
    X = covariates_at(theta, t)
    B = true_coefficients(t, config.p, config.K)
    mean = np.einsum("isj,jis->is", X, B[:, labels, :])
    gp = np.linalg.cholesky(exp_covariance(t, sigma2 / 2.0))
    eps = rng.standard_normal((config.n, config.S)) @ gp.T
    tau = np.sqrt(sigma2 / 2.0) * rng.standard_normal((config.n, config.S))
    y = mean + eps + tau
    data = FunctionalDataset.from_arrays(t, list(y), list(X))
    truth = SimTruth(
        labels=labels,
        sigma2=np.full(config.K, sigma2),
        active=list(range(N_ACTIVE)),
        config=asdict(config),
        theta=theta,
    )
    return data, truth
