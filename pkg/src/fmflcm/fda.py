"""Functional data containers, the shared cubic B-spline system and model parameters.

Coefficient functions are stored as B-spline coefficient vectors ``b`` and
mapped to the solver coordinates ``alpha = D @ b`` where ``D`` is the upper
Cholesky factor of ``gram + r * roughness``.  In those coordinates the
Euclidean norm of ``alpha`` equals the mixed norm
``sqrt(||beta||^2 + r ||beta''||^2)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Hashable, Sequence

import numpy as np
from scipy import linalg
from scipy.interpolate import BSpline

ORDER = 4
DEGREE = ORDER - 1
MAX_INTERIOR_KNOTS = 35
KNOT_EPS = 1e-12
GAUSS_NODES = 7
SIGMA2_FLOOR = 1e-8


@dataclass(frozen=True)
class SubjectRecord:
    id: Hashable
    times: np.ndarray
    y: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).ravel()
        y = np.asarray(self.y, dtype=float).ravel()
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        if times.size < 1:
            raise ValueError(f"subject {self.id!r}: no observations")
        if y.size != times.size or x.shape[0] != times.size:
            raise ValueError(
                f"subject {self.id!r}: {times.size} times, {y.size} responses, "
                f"{x.shape[0]} covariate rows"
            )
        if np.any(times < 0.0) or np.any(times > 1.0):
            raise ValueError(f"subject {self.id!r}: times outside [0, 1]")
        if np.any(np.diff(times) <= 0.0):
            raise ValueError(f"subject {self.id!r}: times not strictly increasing")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x))):
            raise ValueError(f"subject {self.id!r}: non-finite values")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)

    @property
    def n_times(self) -> int:
        return self.times.size


@dataclass(frozen=True)
class FunctionalDataset:
    """Subjects observed on (possibly different) grids in [0, 1].

    The stacked ``(N, ...)`` views used by the estimators are built lazily and
    cached; the object itself is never mutated.
    """

    subjects: tuple
    p: int

    def __post_init__(self):
        subjects = tuple(self.subjects)
        if len(subjects) < 1:
            raise ValueError("dataset needs at least one subject")
        if self.p < 1:
            raise ValueError("dataset needs at least one covariate")
        for s in subjects:
            if s.x.shape[1] != self.p:
                raise ValueError(
                    f"subject {s.id!r} has {s.x.shape[1]} covariates, expected {self.p}"
                )
        object.__setattr__(self, "subjects", subjects)

    @classmethod
    def from_arrays(cls, times, y, x, ids=None) -> "FunctionalDataset":
        """Build from per-subject sequences (or a common time grid and 2-D/3-D arrays)."""
        y = [np.asarray(v, dtype=float) for v in y]
        x = [np.asarray(v, dtype=float) for v in x]
        n = len(y)
        if not isinstance(times[0], (list, tuple, np.ndarray)):
            times = [np.asarray(times, dtype=float)] * n
        ids = list(range(n)) if ids is None else list(ids)
        subjects = [SubjectRecord(ids[i], times[i], y[i], x[i]) for i in range(n)]
        p = subjects[0].x.shape[1]
        return cls(tuple(subjects), p)

    @property
    def n(self) -> int:
        return len(self.subjects)

    @property
    def ids(self) -> list:
        return [s.id for s in self.subjects]

    @cached_property
    def n_times(self) -> np.ndarray:
        return np.array([s.n_times for s in self.subjects])

    @property
    def n_obs(self) -> int:
        return int(self.n_times.sum())

    @cached_property
    def subject_index(self) -> np.ndarray:
        """Subject number of every stacked observation."""
        return np.repeat(np.arange(self.n), self.n_times)

    @cached_property
    def t(self) -> np.ndarray:
        return np.concatenate([s.times for s in self.subjects])

    @cached_property
    def y(self) -> np.ndarray:
        return np.concatenate([s.y for s in self.subjects])

    @cached_property
    def x(self) -> np.ndarray:
        return np.vstack([s.x for s in self.subjects])

    @cached_property
    def time_union(self) -> np.ndarray:
        return np.unique(self.t)

    def with_values(self, y=None, x=None) -> "FunctionalDataset":
        """Copy with replaced stacked responses and/or covariates."""
        y = self.y if y is None else np.asarray(y, dtype=float)
        x = self.x if x is None else np.asarray(x, dtype=float)
        bounds = np.concatenate([[0], np.cumsum(self.n_times)])
        subjects = []
        for i, s in enumerate(self.subjects):
            lo, hi = bounds[i], bounds[i + 1]
            subjects.append(SubjectRecord(s.id, s.times, y[lo:hi], x[lo:hi]))
        return FunctionalDataset(tuple(subjects), x.shape[1])

    def subset(self, index) -> "FunctionalDataset":
        return FunctionalDataset(tuple(self.subjects[i] for i in index), self.p)


def _thin_knots(points: np.ndarray, cap: int) -> np.ndarray:
    if points.size <= cap:
        return points
    q = np.linspace(0.0, 1.0, cap + 2)[1:-1]
    return np.unique(np.quantile(points, q))


@dataclass(frozen=True)
class SplineBasis:
    """Clamped cubic B-spline system on [0, 1]."""

    interior_knots: np.ndarray
    r: float
    gram: np.ndarray = field(repr=False)
    roughness: np.ndarray = field(repr=False)
    D: np.ndarray = field(repr=False)
    order: int = ORDER

    @property
    def L(self) -> int:
        return self.interior_knots.size + self.order

    @cached_property
    def knots(self) -> np.ndarray:
        return np.concatenate(
            [np.zeros(self.order), self.interior_knots, np.ones(self.order)]
        )

    @cached_property
    def _spline(self) -> BSpline:
        return BSpline(self.knots, np.eye(self.L), self.order - 1, extrapolate=False)

    @cached_property
    def D_inv(self) -> np.ndarray:
        return linalg.solve_triangular(self.D, np.eye(self.L), lower=False)

    def design(self, t, deriv: int = 0) -> np.ndarray:
        """Basis values (or derivatives) at ``t``, shape ``(len(t), L)``."""
        t = np.clip(np.atleast_1d(np.asarray(t, dtype=float)), 0.0, 1.0)
        spl = self._spline if deriv == 0 else self._spline.derivative(deriv)
        out = spl(t)
        # extrapolate=False leaves the right endpoint NaN-free but guard anyway
        return np.nan_to_num(out)

    def evaluate(self, b, t) -> np.ndarray:
        """Evaluate ``b.T @ Psi(t)`` for coefficient arrays with trailing axis L."""
        B = self.design(t)
        return np.asarray(b, dtype=float) @ B.T

    def to_alpha(self, b) -> np.ndarray:
        return np.asarray(b, dtype=float) @ self.D.T

    def from_alpha(self, alpha) -> np.ndarray:
        return np.asarray(alpha, dtype=float) @ self.D_inv.T

    @cached_property
    def roughness_alpha(self) -> np.ndarray:
        """Roughness form expressed in alpha coordinates, ``D^-T R D^-1``."""
        M = self.D_inv.T @ self.roughness @ self.D_inv
        return 0.5 * (M + M.T)


def _gauss_integrals(knots: np.ndarray, spline: BSpline) -> tuple[np.ndarray, np.ndarray]:
    nodes, weights = np.polynomial.legendre.leggauss(GAUSS_NODES)
    breaks = np.unique(knots)
    a, b = breaks[:-1], breaks[1:]
    half = 0.5 * (b - a)
    t = (0.5 * (a + b))[:, None] + half[:, None] * nodes[None, :]
    w = (half[:, None] * weights[None, :]).ravel()
    t = t.ravel()
    B = np.nan_to_num(spline(t))
    B2 = np.nan_to_num(spline.derivative(2)(t))
    gram = (B * w[:, None]).T @ B
    rough = (B2 * w[:, None]).T @ B2
    return 0.5 * (gram + gram.T), 0.5 * (rough + rough.T)


def build_basis(times_union, r: float = 0.0, max_interior: int = MAX_INTERIOR_KNOTS) -> SplineBasis:
    """Cubic B-spline basis with knots at the pooled observation times.

    Interior knots are the distinct times strictly inside (0, 1); more than
    ``max_interior`` of them are thinned to evenly spaced quantiles.
    """
    pts = np.asarray(times_union, dtype=float).ravel()
    if pts.size == 0:
        raise ValueError("times_union is empty")
    if np.any(pts < 0.0) or np.any(pts > 1.0):
        raise ValueError("times must lie in [0, 1]")
    if r < 0:
        raise ValueError("r must be nonnegative")
    pts = np.unique(pts)
    interior = pts[(pts > KNOT_EPS) & (pts < 1.0 - KNOT_EPS)]
    interior = _thin_knots(interior, max_interior)
    knots = np.concatenate([np.zeros(ORDER), interior, np.ones(ORDER)])
    L = interior.size + ORDER
    spline = BSpline(knots, np.eye(L), DEGREE, extrapolate=False)
    gram, rough = _gauss_integrals(knots, spline)
    try:
        D = linalg.cholesky(gram + r * rough, lower=False)
    except linalg.LinAlgError as exc:
        raise ValueError("gram + r * roughness is numerically singular") from exc
    if np.min(np.abs(np.diag(D))) < 1e-12 * np.max(np.abs(np.diag(D))):
        raise ValueError("gram + r * roughness is numerically singular")
    return SplineBasis(interior_knots=interior, r=float(r), gram=gram, roughness=rough, D=D)


def eval_coefficient(basis: SplineBasis, b_jk, t):
    """Value of the coefficient function ``b_jk.T @ Psi(t)``."""
    scalar = np.ndim(t) == 0
    out = basis.evaluate(np.asarray(b_jk, dtype=float), t)
    return float(out[0]) if scalar else out


def r_norm(basis: SplineBasis, b_jk) -> float:
    """``sqrt(||beta||^2 + r ||beta''||^2)`` computed as ``||D b||``."""
    return float(np.linalg.norm(basis.D @ np.asarray(b_jk, dtype=float)))


@dataclass(frozen=True)
class MixtureParams:
    """Spline coefficients ``b`` (p, K, L), cluster variances and mixing weights."""

    b: np.ndarray
    sigma2: np.ndarray
    pi: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.b, dtype=float)
        sigma2 = np.asarray(self.sigma2, dtype=float).ravel()
        pi = np.asarray(self.pi, dtype=float).ravel()
        if b.ndim != 3 or b.shape[1] != sigma2.size or pi.size != sigma2.size:
            raise ValueError("inconsistent mixture parameter shapes")
        if np.any(pi < 0) or abs(pi.sum() - 1.0) > 1e-12 * max(1, pi.size):
            raise ValueError("mixing proportions must be nonnegative and sum to 1")
        if np.any(sigma2 < SIGMA2_FLOOR * (1 - 1e-12)):
            raise ValueError("variance below floor")
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "sigma2", sigma2)
        object.__setattr__(self, "pi", pi)

    @property
    def K(self) -> int:
        return self.sigma2.size

    @property
    def p(self) -> int:
        return self.b.shape[0]

    @property
    def L(self) -> int:
        return self.b.shape[2]


@dataclass(frozen=True)
class Responsibilities:
    omega: np.ndarray

    def __post_init__(self):
        omega = np.asarray(self.omega, dtype=float)
        if omega.ndim != 2:
            raise ValueError("omega must be an n x K matrix")
        if np.any(omega < -1e-15) or np.any(np.abs(omega.sum(axis=1) - 1.0) > 1e-10):
            raise ValueError("responsibility rows must be nonnegative and sum to 1")
        object.__setattr__(self, "omega", omega)

    @classmethod
    def from_labels(cls, labels: Sequence[int], K: int) -> "Responsibilities":
        labels = np.asarray(labels, dtype=int)
        omega = np.zeros((labels.size, K))
        omega[np.arange(labels.size), labels] = 1.0
        return cls(omega)

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.omega, axis=1)

    @property
    def n(self) -> int:
        return self.omega.shape[0]

    @property
    def K(self) -> int:
        return self.omega.shape[1]
