import math

import numpy as np
import pytest
import sympy as sp

from ricciverify.flow_evolution import flow_rhs_exact
from ricciverify.warped_geometry import (
    ProfileError,
    RadialProfile,
    curvature_fields,
    detect_necks,
    hamilton_closed_form,
    hamilton_quantity,
)


def symbolic_curvature(n, u_expr, r):
    """Ricci and scalar curvature of dr^2/u + r^2 g_S by the orthonormal-frame
    formulas for a warped product dt^2 + f(t)^2 g_S with dt = u^{-1/2} dr, f = r."""
    # d/dt = sqrt(u) d/dr; f = r so f' = sqrt(u), f'' = u_r / 2
    f_t = sp.sqrt(u_expr)
    f_tt = sp.sqrt(u_expr) * sp.diff(f_t, r)
    ric_tt = -(n - 1) * f_tt / r                       # Ric(e_t, e_t)
    ric_ss = -f_tt / r + (n - 2) * (1 - f_t**2) / r**2  # Ric(e_i, e_i), unit sphere vectors
    R = ric_tt + (n - 1) * ric_ss
    # convert to coordinate coefficients: Ric(dr,dr) = ric_tt / u; Ric on g_S = r^2 ric_ss
    return sp.simplify(ric_tt / u_expr), sp.simplify(r**2 * ric_ss), sp.simplify(R)


PROFILES = {
    "sphere": lambda r: 1 - r**2 / 4,
    "bump": lambda r: 1 / (1 + r**2) + sp.Rational(1, 10) * r**2 / (1 + r**4),
    "power": lambda r: 2 / (2 + r**3),
}


@pytest.mark.parametrize("name", sorted(PROFILES))
@pytest.mark.parametrize("n", [3, 4, 7])
def test_curvature_matches_symbolic_oracle(name, n):
    r = sp.symbols("r", positive=True)
    u = PROFILES[name](r)
    ric_rad, ric_sph, R = symbolic_curvature(n, u, r)
    fu, fur, furr = (sp.lambdify(r, e, "numpy") for e in (u, sp.diff(u, r), sp.diff(u, r, 2)))
    grid = np.linspace(0.3, 1.5, 41)
    prof = RadialProfile.from_function(n, grid, fu, fur, furr)
    cf = curvature_fields(prof)
    for got, expr in ((cf.ric_rad, ric_rad), (cf.ric_sph, ric_sph), (cf.R, R)):
        want = sp.lambdify(r, expr, "numpy")(grid)
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(cf.trace_scalar(prof), cf.R, rtol=1e-12)


@pytest.mark.parametrize("n", [3, 4, 6])
def test_round_sphere(n):
    # u = 1 - r^2 is the unit sphere: Ric = (n-1) g, R = n(n-1)
    r = np.linspace(0.05, 0.95, 60)
    prof = RadialProfile.from_function(n, r, lambda x: 1 - x**2, lambda x: -2 * x,
                                       lambda x: -2 + 0 * x, nonneg_curvature=True)
    cf = curvature_fields(prof)
    np.testing.assert_allclose(cf.R, n * (n - 1), rtol=1e-13)
    np.testing.assert_allclose(cf.ric_rad * prof.u, n - 1, rtol=1e-13)
    np.testing.assert_allclose(cf.ric_sph / r**2, n - 1, rtol=1e-13)


@pytest.mark.parametrize("n", [3, 5])
def test_hamilton_parts_equal_closed_form(n):
    r = np.geomspace(0.2, 20, 300)
    u = 1 / (1 + r**2)
    prof = RadialProfile.from_function(n, r, lambda x: 1 / (1 + x**2),
                                       lambda x: -2 * x / (1 + x**2) ** 2)
    hq = hamilton_quantity(prof)
    np.testing.assert_allclose(hq.H, hq.H_closed, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(hamilton_closed_form(n, r, u, prof.u_r), hq.H_closed)


def test_evolution_identity_second_order():
    """H_r + (n-1)/r (1 + r v/((n-1)u)) u_t/u vanishes on flow solutions, so with
    u_t from the flow's right-hand side the residual is pure difference error."""
    n = 4
    errs = []
    for m in (200, 400, 800):
        r = np.linspace(0.5, 3.0, m)
        u = 1 / (1 + r**2) + 0.2 * np.exp(-r**2)
        ur = -2 * r / (1 + r**2) ** 2 - 0.4 * r * np.exp(-r**2)
        urr = (6 * r**2 - 2) / (1 + r**2) ** 3 + (0.8 * r**2 - 0.4) * np.exp(-r**2)
        prof = RadialProfile(n, r, u, ur, urr)
        res = hamilton_quantity(prof, flow_rhs_exact(r, u, ur, urr, n)).evolution_residual
        errs.append(np.max(np.abs(res[2:-2])))
    rates = [math.log2(a / b) for a, b in zip(errs, errs[1:])]
    assert min(rates) > 1.8


def test_evolution_identity_detects_wrong_time_derivative():
    n = 4
    r = np.linspace(0.5, 3.0, 400)
    u = 1 / (1 + r**2)
    prof = RadialProfile(n, r, u)
    res = hamilton_quantity(prof, np.zeros_like(r)).evolution_residual
    assert np.max(np.abs(res)) > 1e-2


def test_necks_found_on_long_thin_region():
    n = 4
    r = np.geomspace(1.0, 1e8, 2000)
    # u tiny on a long log interval mimics a thin neck, then rises to a cap
    u = np.where((r > 10) & (r < 1e6), 1e-4, 0.5)
    rep = detect_necks(RadialProfile(n, r, u), eps=0.05)
    assert len(rep.necks) == 1
    lo, hi = rep.necks[0]
    assert 10 < lo < 11 and 0.9e6 < hi < 1e6
    assert rep.neck_lengths[0] >= 1 / 0.05
    assert len(rep.cap) == 2 and rep.cap_diameter > 0
    assert "stand-in" in rep.note and "1/eps" in rep.note


def test_no_neck_when_u_is_large():
    r = np.linspace(0.1, 1, 50)
    rep = detect_necks(RadialProfile(3, r, 1 - 0.5 * r**2))
    assert rep.necks == [] and len(rep.cap) == 1


def test_neck_eps_range():
    prof = RadialProfile(3, np.linspace(0.1, 1, 20), np.full(20, 0.5))
    with pytest.raises(ValueError):
        detect_necks(prof, eps=0.7)


def test_csv_roundtrip(tmp_path):
    r = np.linspace(0.1, 1, 30)
    prof = RadialProfile(5, r, 1 - 0.3 * r**2, meta={"source": "test"})
    path = prof.to_csv(tmp_path / "p.csv", t=0.25)
    back = RadialProfile.from_csv(path)
    assert back.n == 5
    np.testing.assert_array_equal(back.r, prof.r)
    np.testing.assert_array_equal(back.u, prof.u)
    np.testing.assert_array_equal(back.u_r, prof.u_r)
    assert float(back.meta["t"]) == 0.25


def test_csv_without_dimension(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("r,u\n" + "".join(f"{x},{1 - x * x / 4}\n" for x in np.linspace(0.1, 1, 10)))
    with pytest.raises(ProfileError, match="n=<dim>"):
        RadialProfile.from_csv(p)


@pytest.mark.parametrize("kwargs, match", [
    ({"n": 2}, "dimension"),
    ({"r": np.linspace(0.1, 1, 5), "u": np.ones(5)}, "at least"),
    ({"r": np.linspace(0, 1, 10)}, "strictly increasing"),
    ({"u": np.ones(11)}, "equal length"),
])
def test_profile_validation(kwargs, match):
    base = {"n": 3, "r": np.linspace(0.1, 1, 10), "u": np.ones(10)}
    base.update(kwargs)
    with pytest.raises(ProfileError, match=match):
        RadialProfile(**base)


def test_nonpositive_u_rejected_for_curvature():
    r = np.linspace(0.1, 2, 20)
    prof = RadialProfile(3, r, 1 - r**2)
    with pytest.raises(ProfileError, match="positive"):
        curvature_fields(prof)


@pytest.mark.parametrize("u", [lambda r: 1 + 0 * r + 0.1, lambda r: 0.5 + 0.1 * r])
def test_nonneg_curvature_flag(u):
    r = np.linspace(0.1, 1, 20)
    with pytest.raises(ProfileError):
        RadialProfile(3, r, u(r), nonneg_curvature=True)
