"""Clustering, selection and estimation accuracy against a known truth."""

from __future__ import annotations

import numpy as np
from scipy.integrate import trapezoid
from scipy.optimize import linear_sum_assignment
from sklearn.metrics import adjusted_rand_score

MSE_GRID = np.linspace(0.0, 1.0, 1001)


def ari(labels_a, labels_b) -> float:
    """Adjusted Rand index between two partitions."""
    a = np.asarray(labels_a).ravel()
    b = np.asarray(labels_b).ravel()
    if a.shape != b.shape:
        raise ValueError("label vectors differ in length")
    return float(adjusted_rand_score(a, b))


def confusion(labels_est, labels_true, K_est: int | None = None, K_true: int | None = None) -> np.ndarray:
    est = np.asarray(labels_est, dtype=int).ravel()
    true = np.asarray(labels_true, dtype=int).ravel()
    if est.shape != true.shape:
        raise ValueError("label vectors differ in length")
    K_est = int(est.max()) + 1 if K_est is None else K_est
    K_true = int(true.max()) + 1 if K_true is None else K_true
    out = np.zeros((K_est, K_true), dtype=int)
    np.add.at(out, (est, true), 1)
    return out


def align_clusters(labels_est, labels_true, K_est: int | None = None, K_true: int | None = None) -> np.ndarray:
    """Map each estimated cluster to a true cluster, maximizing agreement.

    Accepts hard labels or an (n, K) responsibility matrix for the estimate.
    Returns ``perm`` with ``perm[k_est]`` the matched true cluster, or -1
    for estimated clusters left unmatched when the counts differ.
    """
    est = np.asarray(labels_est)
    if est.ndim == 2:
        K_est = est.shape[1] if K_est is None else K_est
        est = est.argmax(axis=1)
    C = confusion(est, labels_true, K_est, K_true)
    rows, cols = linear_sum_assignment(C, maximize=True)
    perm = np.full(C.shape[0], -1, dtype=int)
    perm[rows] = cols
    return perm


def zero_blocks(beta_hat) -> np.ndarray:
    """Exact-zero pattern of a (p, K, ...) coefficient array, shape (p, K)."""
    b = np.asarray(beta_hat)
    if b.dtype == bool and b.ndim == 2:
        return ~b
    return ~np.any(b.reshape(b.shape[0], b.shape[1], -1) != 0.0, axis=2)


def selection_counts(beta_hat, active=range(6)) -> tuple:
    """(C, IC): zero blocks among truly inactive and among truly active covariates.

    ``beta_hat`` is a (p, K, ...) coefficient array or a (p, K) boolean
    nonzero mask.
    """
    z = zero_blocks(beta_hat)
    act = np.zeros(z.shape[0], dtype=bool)
    act[list(active)] = True
    return int(z[~act].sum()), int(z[act].sum())


def _sq_norms(curves: np.ndarray, t: np.ndarray) -> np.ndarray:
    return trapezoid(curves**2, t, axis=-1)


def coef_mse(beta_hat, beta_true, perm=None, t=MSE_GRID) -> float:
    """Standardized squared L2 error of coefficient curves sampled on ``t``.

    ``beta_hat`` (p, K_est, len(t)) and ``beta_true`` (p, K_true, len(t));
    ``perm`` from :func:`align_clusters` (identity when omitted).  True
    clusters without a match are compared against zero, as are unmatched
    estimated clusters.
    """
    bh = np.asarray(beta_hat, dtype=float)
    bt = np.asarray(beta_true, dtype=float)
    t = np.asarray(t, dtype=float)
    if bh.shape[0] != bt.shape[0] or bh.shape[-1] != bt.shape[-1] or bt.shape[-1] != t.size:
        raise ValueError("coefficient arrays do not conform")
    truth_sq = [float(np.sum(_sq_norms(bt[:, k], t))) for k in range(bt.shape[1])]
    denom = float(sum(truth_sq))
    if denom == 0.0:
        raise ValueError("true coefficients are all zero")
    if perm is None:
        if bh.shape[1] != bt.shape[1]:
            raise ValueError("cluster counts differ; supply an alignment")
        perm = np.arange(bh.shape[1])
    perm = np.asarray(perm, dtype=int)
    # per true cluster, summed in the same order as the denominator
    err = list(truth_sq)
    extra = 0.0
    for k_est, k_true in enumerate(perm):
        if k_true < 0:
            extra += float(np.sum(_sq_norms(bh[:, k_est], t)))
        else:
            err[k_true] = float(np.sum(_sq_norms(bh[:, k_est] - bt[:, k_true], t)))
    num = float(sum(err)) + extra
    return num / denom


def relative_importance(beta_j, t_beta, x_j, t_x) -> float:
    """Coefficient norm times covariate dispersion for one covariate.

    ``beta_j`` (K, len(t_beta)) curves across clusters; ``x_j`` (n, len(t_x))
    covariate values on a common grid.  Norms are trapezoid L2 norms.
    """
    beta_j = np.atleast_2d(np.asarray(beta_j, dtype=float))
    x_j = np.atleast_2d(np.asarray(x_j, dtype=float))
    bnorm = np.sqrt(float(np.sum(_sq_norms(beta_j, np.asarray(t_beta, dtype=float)))))
    # shifting by the first row first keeps constant covariates exactly zero
    dev = x_j - x_j[:1]
    dev = dev - dev.mean(axis=0, keepdims=True)
    disp = np.sqrt(float(np.mean(_sq_norms(dev, np.asarray(t_x, dtype=float)))))
    return bnorm * disp
