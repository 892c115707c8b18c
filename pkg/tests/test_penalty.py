import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import brentq, minimize_scalar

from fmflcm.penalty import PenaltyConfig, group_prox, penalty_value, scad, scad_derivative

GAMMA = 3.7


def test_scad_branches():
    assert scad(0.5, 1.0, GAMMA) == pytest.approx(0.5, abs=1e-15)
    # middle branch -(4 - 14.8 + 1) / 5.4
    assert scad(2.0, 1.0, GAMMA) == pytest.approx(1.8148148148148149, abs=1e-12)
    assert scad(5.0, 1.0, GAMMA) == pytest.approx(2.35, abs=1e-12)
    assert scad(0.0, 2.0) == 0.0
    with pytest.raises(ValueError):
        scad(-1.0, 1.0)


def test_scad_continuous_monotone_and_derivative():
    lam = 0.7
    u = np.linspace(0, 6, 6001)
    v = scad(u, lam, GAMMA)
    assert np.all(np.diff(v) >= -1e-15)
    for knot in (lam, GAMMA * lam):
        assert abs(scad(knot - 1e-9, lam) - scad(knot + 1e-9, lam)) < 1e-8
    h = 1e-6
    for x in (0.3, 1.5, 4.0):
        fd = (scad(x + h, lam) - scad(x - h, lam)) / (2 * h)
        assert fd == pytest.approx(scad_derivative(x, lam), abs=1e-6)
    assert scad_derivative(1e-12, lam) == pytest.approx(lam)
    assert scad_derivative(10.0, lam) == 0.0


def test_penalty_values():
    alpha = np.zeros((3, 2, 4))
    for kind in ("fs", "fs-net", "fgs-net"):
        assert penalty_value(PenaltyConfig(kind, lam=1.0, rho=0.5), alpha) == 0.0
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 2, 4))
    fs = penalty_value(PenaltyConfig("fs", lam=0.8), a)
    fsnet = penalty_value(PenaltyConfig("fs-net", lam=0.8, rho=1.0), a)
    assert fs == pytest.approx(fsnet, rel=1e-15)
    # FGS-Net example: one covariate, two clusters, stacked norm 2
    a = np.zeros((1, 2, 3))
    a[0, 0, 0] = math.sqrt(2.0)
    a[0, 1, 2] = math.sqrt(2.0)
    v = penalty_value(PenaltyConfig("fgs-net", lam=1.0, rho=0.5, gamma=GAMMA), a)
    assert v == pytest.approx(0.5 * 1.8148148148148149 + 0.5 * 4.0, abs=1e-12)
    assert v == pytest.approx(2.9074074074074074, abs=1e-12)


def test_rp_penalty_uses_roughness_form():
    R = np.diag([0.0, 1.0, 2.0])
    a = np.ones((2, 1, 3))
    assert penalty_value(PenaltyConfig("rp", lam=0.5), a, R) == pytest.approx(0.5 * 2 * 3.0)
    with pytest.raises(ValueError):
        penalty_value(PenaltyConfig("rp", lam=0.5), a)


def test_per_cluster_lambdas():
    cfg = PenaltyConfig("fs", lam=(0.5, 1.0))
    np.testing.assert_array_equal(cfg.lambdas(2), [0.5, 1.0])
    with pytest.raises(ValueError):
        cfg.lambdas(3)
    with pytest.raises(ValueError):
        PenaltyConfig("fgs-net", lam=(0.5, 1.0))
    assert PenaltyConfig("fs", rho=0.2).rho == 1.0
    with pytest.raises(ValueError):
        PenaltyConfig("fgs-net", gamma=2.0)
    with pytest.raises(ValueError):
        PenaltyConfig("fgs-net", rho=1.5)


@given(seed=st.integers(0, 2**31))
def test_grouped_penalty_is_rotation_invariant(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(2, 3, 4))
    cfg = PenaltyConfig("fgs-net", lam=abs(rng.normal()), rho=rng.uniform())
    q, _ = np.linalg.qr(rng.normal(size=(12, 12)))
    b = a.copy()
    b[1] = (q @ a[1].ravel()).reshape(3, 4)
    assert penalty_value(cfg, b) == pytest.approx(penalty_value(cfg, a), rel=1e-12, abs=1e-14)


def _prox_scalar_objective(s, z, nu, lam, rho, gamma):
    return 0.5 * nu * (s - z) ** 2 + rho * scad(s, lam, gamma) + (1 - rho) * lam * s * s


def _oracle_slope(s, z, nu, lam, rho, gamma):
    if s <= lam:
        d = lam
    elif s <= gamma * lam:
        d = (gamma * lam - s) / (gamma - 1.0)
    else:
        d = 0.0
    return nu * (s - z) + rho * d + 2.0 * (1.0 - rho) * lam * s


def _oracle(z, nu, lam, rho, gamma):
    """Dense grid and golden-section search locate the basin; the root of the
    hand-written slope inside it pins the minimizer to full precision."""
    f = lambda s: _prox_scalar_objective(s, z, nu, lam, rho, gamma)
    grid = np.linspace(0.0, z, 20001)
    i = int(np.argmin(f(grid)))
    h = z / 20000
    res = minimize_scalar(f, bounds=(max(0.0, grid[i] - h), min(z, grid[i] + h)), method="bounded")
    lo, hi = max(0.0, res.x - 2 * h), min(z, res.x + 2 * h)
    cands = [0.0, z, lo, hi, res.x]
    g_lo, g_hi = (_oracle_slope(x, z, nu, lam, rho, gamma) for x in (max(lo, 1e-300), hi))
    if g_lo < 0.0 < g_hi:
        cands.append(brentq(_oracle_slope, max(lo, 1e-300), hi, args=(z, nu, lam, rho, gamma), xtol=1e-15))
    return min(cands, key=f)


def test_group_prox_examples():
    z = np.array([3.0, 4.0])
    np.testing.assert_array_equal(group_prox(np.zeros(3), 1.0, 1.0, 1.0), np.zeros(3))
    np.testing.assert_allclose(group_prox(z, 2.0, 0.0, 0.3), z)
    np.testing.assert_allclose(group_prox(z, 1.0, 1.0, 1.0, GAMMA), z, atol=1e-15)
    assert math.isclose(_oracle(5.0, 1.0, 1.0, 1.0, GAMMA), 5.0, abs_tol=1e-8)
    with pytest.raises(ValueError):
        group_prox(z, 0.0, 1.0, 1.0)


def test_group_prox_matches_numeric_oracle():
    rng = np.random.default_rng(20240601)
    worst = 0.0
    for _ in range(1000):
        d = int(rng.integers(1, 6))
        z = rng.normal(size=d) * rng.uniform(0.1, 5.0)
        nu = float(rng.uniform(0.5, 5.0))
        lam = float(rng.uniform(0.0, 2.0))
        rho = float(rng.uniform(0.0, 1.0))
        out = group_prox(z, nu, lam, rho, GAMMA)
        zn = float(np.linalg.norm(z))
        s_ref = _oracle(zn, nu, lam, rho, GAMMA)
        worst = max(worst, abs(float(np.linalg.norm(out)) - s_ref))
        # direction preserving
        if np.linalg.norm(out) > 0:
            np.testing.assert_allclose(out / np.linalg.norm(out), z / zn, atol=1e-12)
    assert worst <= 1e-8


@given(z=st.floats(0.01, 10.0), nu=st.floats(0.05, 10.0), lam=st.floats(0.0, 3.0), rho=st.floats(0.0, 1.0))
def test_group_prox_never_beaten_and_never_inflates(z, nu, lam, rho):
    s = float(group_prox(np.array([z]), nu, lam, rho, GAMMA)[0])
    assert 0.0 <= s <= z + 1e-12
    f = _prox_scalar_objective(s, z, nu, lam, rho, GAMMA)
    grid = np.linspace(0.0, z, 4001)
    assert f <= _prox_scalar_objective(grid, z, nu, lam, rho, GAMMA).min() + 1e-10 * max(1.0, abs(f))
