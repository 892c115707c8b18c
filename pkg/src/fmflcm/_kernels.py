"""Compiled sweeps for the penalized weighted least-squares M-step.

Two drivers share the block updates:

* ``sweep_residual``: keeps per-cluster residuals, block gradients cost O(N L).
* ``sweep_gram``: keeps per-cluster gradients against a full cross-product
  matrix, block gradients are free and updates cost O(pL * L).

SCAD-type block updates take a majorized proximal step to settle whether
the block is zero and then polish a nonzero block to the best stationary
point of its exact objective.

Kind codes: 0 = per-block SCAD/ridge (fs, fs-net), 1 = grouped across
clusters (fgs-net), 2 = roughness quadratic (rp).
"""

import numpy as np
from numba import njit

from .penalty import scalar_prox


KIND_BLOCK = 0
KIND_GROUP = 1
KIND_RP = 2


@njit(cache=True)
def _quad_solve(G, S, lam, a, grad):
    """Exact minimizer of ``0.5 d'Gd + grad'd + lam (a+d)'S(a+d)``; min-norm step."""
    M = G + 2.0 * lam * S
    rhs = -(grad + 2.0 * lam * (S @ a))
    d = np.linalg.lstsq(M, rhs, rcond=1e-12)[0]
    return a + d


@njit(cache=True)
def _norm_penalty(na, lam, rho, gamma):
    gl = gamma * lam
    if na <= lam:
        pen = lam * na
    elif na < gl:
        pen = -(na * na - 2.0 * gl * na + lam * lam) / (2.0 * (gamma - 1.0))
    else:
        pen = 0.5 * (gamma + 1.0) * lam * lam
    return rho * pen + (1.0 - rho) * lam * na * na


@njit(cache=True)
def _radius(beta, e, mu):
    acc = 0.0
    for i in range(beta.size):
        if beta[i] != 0.0:
            v = beta[i] / (e[i] + mu)
            acc += v * v
    return np.sqrt(acc)


@njit(cache=True)
def _mu_for_radius(beta, e, target, mu_lo):
    """``mu >= mu_lo`` with ``||beta / (e + mu)|| = target`` (radius decreases in mu)."""
    if _radius(beta, e, mu_lo) <= target:
        return mu_lo
    hi = max(2.0 * mu_lo, 1.0)
    while _radius(beta, e, hi) > target:
        hi *= 2.0
    lo = mu_lo
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if _radius(beta, e, mid) > target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@njit(cache=True)
def _stationary_gap(beta, e, mu, A, B):
    return _radius(beta, e, mu) * (mu - B) - A


@njit(cache=True)
def _bisect_gap(beta, e, lo, hi, A, B):
    flo = _stationary_gap(beta, e, lo, A, B)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        fm = _stationary_gap(beta, e, mid, A, B)
        if (fm < 0.0) == (flo < 0.0):
            lo = mid
            flo = fm
        else:
            hi = mid
    return 0.5 * (lo + hi)


@njit(cache=True)
def _block_value(y, e, beta, lam, rho, gamma):
    val = 0.0
    for i in range(y.size):
        val += 0.5 * e[i] * y[i] * y[i] + beta[i] * y[i]
    return val + _norm_penalty(np.sqrt(np.sum(y * y)), lam, rho, gamma)


@njit(cache=True)
def _exact_minimizer(e, beta_raw, lam, rho, gamma, y_now):
    """Best nonzero stationary point of ``0.5 y'diag(e)y + beta'y + pen(||y||)``.

    Works in eigen coordinates.  Nonzero stationary points satisfy
    ``y = -beta / (e + mu)`` with ``mu = pen'(n) / n`` and ``n = ||y||``; on
    each SCAD piece ``pen'`` is affine in ``n``, so they are roots of
    one-dimensional monotone or bracketed equations in ``mu``.  Returns the
    best of these and ``y_now``.
    """
    m = e.size
    emax = 0.0
    for i in range(m):
        if e[i] > emax:
            emax = e[i]
    beta = beta_raw.copy()
    for i in range(m):
        if e[i] <= 1e-12 * emax:
            beta[i] = 0.0
    c = (1.0 - rho) * lam
    gl = gamma * lam
    best = y_now.copy()
    best_v = _block_value(y_now, e, beta_raw, lam, rho, gamma)
    nb = np.sqrt(np.sum(beta * beta))
    if nb == 0.0 or emax == 0.0:
        return best
    cand = np.empty(m)
    mus = np.empty(40)
    nm = 0
    # plateau piece: pen' = 2 c n
    mus[nm] = 2.0 * c
    nm += 1
    # linear piece: pen' = rho lam + 2 c n, gap increasing in mu
    if nb > rho * lam:
        lo = 2.0 * c
        hi = max(2.0 * lo, 1.0)
        while _stationary_gap(beta, e, hi, rho * lam, 2.0 * c) < 0.0:
            hi *= 2.0
        mus[nm] = _bisect_gap(beta, e, lo, hi, rho * lam, 2.0 * c)
        nm += 1
    # concave piece: pen' = A + B n on n in (lam, gamma lam)
    A = rho * gl / (gamma - 1.0)
    B = 2.0 * c - rho / (gamma - 1.0)
    floor = max(B, 0.0)
    mu_a = _mu_for_radius(beta, e, gl, floor)
    mu_b = _mu_for_radius(beta, e, lam, floor)
    if mu_b > mu_a:
        ngrid = 24
        prev_mu = mu_a
        prev_f = _stationary_gap(beta, e, prev_mu, A, B)
        for g in range(1, ngrid + 1):
            mu = mu_a + (mu_b - mu_a) * g / ngrid
            f = _stationary_gap(beta, e, mu, A, B)
            if (f < 0.0) != (prev_f < 0.0) and nm < mus.size:
                mus[nm] = _bisect_gap(beta, e, prev_mu, mu, A, B)
                nm += 1
            prev_mu = mu
            prev_f = f
    for t in range(nm):
        mu = mus[t]
        for i in range(m):
            d = e[i] + mu
            cand[i] = -beta[i] / d if (beta[i] != 0.0 and d > 0.0) else 0.0
        v = _block_value(cand, e, beta_raw, lam, rho, gamma)
        if v < best_v:
            best_v = v
            best = cand.copy()
    return best


@njit(cache=True)
def _exact_update(a, grad, G, E, V, nu, lam, rho, gamma):
    """Update the stacked block ``a`` (K, L) in place.

    A majorized proximal step with curvature ``nu`` decides whether the
    block is zero, which keeps the usual threshold rule (a zero block stays
    zero while its gradient norm is at most ``rho * lam``).  A nonzero block
    then moves to the best nonzero stationary point of the exact block
    objective when that is lower.  ``G`` (K, L, L) block cross-products with
    eigenpairs ``E`` (K, L) and ``V`` (K, L, L); ``grad`` is the smooth
    gradient at ``a`` and is updated.
    """
    K, L = a.shape
    z = a - grad / nu
    nz = np.sqrt(np.sum(z * z))
    s = 0.0
    if nz > 0.0:
        s = scalar_prox(nz, nu, lam, rho, gamma) / nz
    if s == 0.0:
        for k in range(K):
            grad[k] -= G[k] @ a[k]
            a[k] = 0.0
        return
    for k in range(K):
        d = z[k] * s - a[k]
        grad[k] += G[k] @ d
        a[k] += d
    m = K * L
    e = np.empty(m)
    beta = np.empty(m)
    y_now = np.empty(m)
    for k in range(K):
        b = grad[k] - G[k] @ a[k]
        bt = V[k].T @ b
        at = V[k].T @ a[k]
        for l in range(L):
            e[k * L + l] = max(E[k, l], 0.0)
            beta[k * L + l] = bt[l]
            y_now[k * L + l] = at[l]
    y = _exact_minimizer(e, beta, lam, rho, gamma, y_now)
    for k in range(K):
        new = V[k] @ y[k * L:(k + 1) * L]
        d = new - a[k]
        grad[k] += G[k] @ d
        a[k] = new


@njit(cache=True)
def _update_block(a, grad, G, E, V, nu, lam, rho, gamma, S, quad):
    """Update one (j, k) block in place; ``grad`` tracks the smooth gradient."""
    L = a.shape[0]
    if quad:
        new = _quad_solve(G, S, lam, a, grad)
        d = new - a
        grad += G @ d
        a[:] = new
        return
    _exact_update(
        a.reshape(1, L), grad.reshape(1, L), G.reshape(1, L, L), E.reshape(1, L), V.reshape(1, L, L),
        nu, lam, rho, gamma,
    )


@njit(cache=True)
def _update_group(a, grad, G, E, V, nu, lam, rho, gamma):
    """Update the stacked (K, L) group of one covariate in place."""
    K, L = a.shape
    if rho == 0.0:
        for k in range(K):
            S = np.eye(L)
            new = _quad_solve(G[k], S, lam, a[k], grad[k])
            d = new - a[k]
            grad[k] += G[k] @ d
            a[k] = new
        return
    _exact_update(a, grad, G, E, V, nu, lam, rho, gamma)


@njit(cache=True)
def _is_zero(v):
    for x in v.ravel():
        if x != 0.0:
            return False
    return True


@njit(cache=True)
def sweep_residual(
    H, W, R, alpha, Gb, E, V, nu, lams, rho, gamma, kind, S, full
):
    """One cyclic pass; ``full=False`` skips groups that are currently zero.

    H: (p, N, L) design in alpha coordinates; W: (K, N) weights; R: (K, N)
    residuals, updated in place; alpha: (p, K, L), updated in place.
    Returns the largest absolute coefficient change.
    """
    p, N, L = H.shape
    K = W.shape[0]
    maxchg = 0.0
    quad = kind == KIND_RP or rho == 0.0
    if kind == KIND_GROUP:
        grad = np.empty((K, L))
        Gg = np.empty((K, L, L))
        for j in range(p):
            if not full and _is_zero(alpha[j]):
                continue
            Hj = H[j]
            for k in range(K):
                wr = W[k] * R[k]
                grad[k] = -(wr @ Hj)
            old = alpha[j].copy()
            numax = 0.0
            for k in range(K):
                Gg[k] = Gb[j, k]
                if nu[j, k] > numax:
                    numax = nu[j, k]
            if numax <= 0.0:
                continue
            _update_group(alpha[j], grad, Gg, E[j], V[j], numax, lams[0], rho, gamma)
            d = alpha[j] - old
            dm = np.max(np.abs(d))
            if dm > 0.0:
                for k in range(K):
                    R[k] -= Hj @ d[k]
                if dm > maxchg:
                    maxchg = dm
        return maxchg
    for j in range(p):
        Hj = H[j]
        for k in range(K):
            if not full and not quad and _is_zero(alpha[j, k]):
                continue
            if nu[j, k] <= 0.0:
                continue
            grad = -((W[k] * R[k]) @ Hj)
            old = alpha[j, k].copy()
            _update_block(alpha[j, k], grad, Gb[j, k], E[j, k], V[j, k], nu[j, k], lams[k], rho, gamma, S, quad)
            d = alpha[j, k] - old
            dm = np.max(np.abs(d))
            if dm > 0.0:
                R[k] -= Hj @ d
                if dm > maxchg:
                    maxchg = dm
    return maxchg


@njit(cache=True)
def sweep_gram(Gc, g, alpha, E, V, nu, lams, rho, gamma, kind, S, full):
    """Same pass as :func:`sweep_residual` driven by full cross-products.

    Gc: (K, p, P, L) column blocks of the weighted cross-product matrix,
    P = p * L; g: (K, P) smooth gradient, updated in place.
    """
    p, K, L = alpha.shape
    maxchg = 0.0
    quad = kind == KIND_RP or rho == 0.0
    if kind == KIND_GROUP:
        grad = np.empty((K, L))
        Gg = np.empty((K, L, L))
        for j in range(p):
            if not full and _is_zero(alpha[j]):
                continue
            lo = j * L
            hi = lo + L
            numax = 0.0
            for k in range(K):
                grad[k] = g[k, lo:hi]
                Gg[k] = Gc[k, j, lo:hi]
                if nu[j, k] > numax:
                    numax = nu[j, k]
            if numax <= 0.0:
                continue
            old = alpha[j].copy()
            _update_group(alpha[j], grad, Gg, E[j], V[j], numax, lams[0], rho, gamma)
            d = alpha[j] - old
            dm = np.max(np.abs(d))
            if dm > 0.0:
                for k in range(K):
                    g[k] += Gc[k, j] @ d[k]
                if dm > maxchg:
                    maxchg = dm
        return maxchg
    for j in range(p):
        lo = j * L
        hi = lo + L
        for k in range(K):
            if not full and not quad and _is_zero(alpha[j, k]):
                continue
            if nu[j, k] <= 0.0:
                continue
            grad = g[k, lo:hi].copy()
            old = alpha[j, k].copy()
            _update_block(
                alpha[j, k], grad, np.ascontiguousarray(Gc[k, j, lo:hi]), E[j, k], V[j, k],
                nu[j, k], lams[k], rho, gamma, S, quad,
            )
            d = alpha[j, k] - old
            dm = np.max(np.abs(d))
            if dm > 0.0:
                g[k] += Gc[k, j] @ d
                if dm > maxchg:
                    maxchg = dm
    return maxchg
