import math

import numpy as np
import pytest

from ricciverify.flow_evolution import (
    FlowBlowUp,
    FlowState,
    StepperConfig,
    arclength_profile,
    cell_grid,
    comparison_test,
    discrete_rhs,
    evolve,
    f_equation_residual,
    flow_rhs_exact,
    follow_marked_radius,
    rescaled_profile,
    soliton_stationarity,
    sphere_convergence,
    sphere_profile_exact,
)
from ricciverify.warped_geometry import RadialProfile


def sphere_run(n=4, cells=40, dt=0.005, t_final=0.2, rho0=2.0, save_every=1):
    r = cell_grid(1.0, cells)
    cfg = StepperConfig(dt, outer_data=lambda t: sphere_profile_exact(r[-1], t, n, rho0),
                        save_every=save_every)
    return evolve(RadialProfile(n, r, sphere_profile_exact(r, 0.0, n, rho0)), t_final, cfg)


def test_exact_sphere_solves_the_pde():
    # u = 1 - r^2 / (rho0^2 - 2(n-1)t) satisfies u_t = flow rhs
    n, rho0, t = 5, 2.0, 0.1
    r = np.linspace(0.1, 1.0, 10)
    lam = 1 / (rho0**2 - 2 * (n - 1) * t)
    u_t = -2 * (n - 1) * lam**2 * r**2
    rhs = flow_rhs_exact(r, 1 - lam * r**2, -2 * lam * r, -2 * lam + 0 * r, n)
    np.testing.assert_allclose(rhs, u_t, rtol=1e-13, atol=1e-13)


@pytest.mark.parametrize("scheme", ["bdf2"])
def test_sphere_convergence_second_order(scheme):
    rows = sphere_convergence(n=3, cells=20, dt=0.01, refinements=3)
    ratios = [r.ratio for r in rows[1:]]
    assert min(ratios) >= 3.5, ratios
    assert rows[-1].error < 1e-4


def test_ros2_option_runs_and_converges():
    errs = []
    for cells, dt in ((20, 0.01), (40, 0.005)):
        r = cell_grid(1.0, cells)
        cfg = StepperConfig(dt, scheme="ros2",
                            outer_data=lambda t, R=r[-1]: sphere_profile_exact(R, t, 3, 2.0))
        st = evolve(RadialProfile(3, r, sphere_profile_exact(r, 0.0, 3, 2.0)), 0.3, cfg)
        errs.append(np.max(np.abs(st.profiles[-1].u - sphere_profile_exact(r, 0.3, 3, 2.0))))
    assert errs[1] < errs[0] / 2


def test_maximum_principle_on_admissible_data():
    st = sphere_run(cells=40, t_final=0.5)
    mp = st.checks["max_principle"]
    assert mp["applies"] and mp["passed"]
    assert mp["u_min"] >= -1e-8 and mp["u_max"] <= 1 + 1e-8


def test_maximum_principle_not_applicable_outside_range():
    r = cell_grid(1.0, 20)
    u = 1.2 - 0.5 * r**2
    cfg = StepperConfig(0.01, outer="zero_gradient")
    st = evolve(RadialProfile(3, r, u), 0.05, cfg)
    assert st.checks["max_principle"]["applies"] is False
    assert st.boundary["caveat"]


@pytest.mark.parametrize("n", [4, 5])
def test_soliton_is_stationary(n, get_soliton):
    rep = soliton_stationarity(get_soliton(n))
    assert rep.passed
    assert rep.drift_per_time <= 10 * rep.defect


def test_discrete_rhs_is_second_order_consistent():
    n = 4
    errs = []
    for m in (50, 100, 200):
        r = np.linspace(0.5, 2.0, m)
        u = 1 / (1 + r**2)
        ur, urr = -2 * r / (1 + r**2) ** 2, (6 * r**2 - 2) / (1 + r**2) ** 3
        cfg = StepperConfig(0.1, inner="dirichlet", inner_data=lambda t: u[0],
                            outer_data=lambda t: u[-1])
        got = discrete_rhs(RadialProfile(n, r, u), cfg)
        errs.append(np.max(np.abs(got - flow_rhs_exact(r, u, ur, urr, n)[1:-1])))
    assert min(a / b for a, b in zip(errs, errs[1:])) > 3.5


def test_state_roundtrip(tmp_path):
    st = sphere_run(cells=20, dt=0.02, t_final=0.1)
    back = FlowState.from_directory(st.to_directory(tmp_path / "run"))
    assert back.n == st.n and back.times == st.times
    np.testing.assert_array_equal(back.u(), st.u())
    assert back.checks["max_principle"] == st.checks["max_principle"]


def test_blow_up_is_reported():
    # the sphere of radius 1 in n = 3 becomes singular at t = 1/4
    n = 3
    r = cell_grid(1.0, 20)
    cfg = StepperConfig(0.005, outer_data=lambda t: sphere_profile_exact(r[-1], t, n, 1.0))
    with pytest.raises(FlowBlowUp) as exc:
        evolve(RadialProfile(n, r, sphere_profile_exact(r, 0.0, n, 1.0)), 0.3, cfg)
    assert exc.value.t <= 0.25 + 1e-9
    assert exc.value.state is not None


@pytest.mark.parametrize("kwargs", [{"dt": 0}, {"dt": 0.1, "scheme": "rk4"},
                                    {"dt": 0.1, "inner": "neumann"}, {"dt": 0.1, "outer": "x"},
                                    {"dt": 0.1, "save_every": 0}])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        StepperConfig(**kwargs)


# -- comparison with a barrier -------------------------------------------------

class Bump:
    """Stand-in barrier that is not a supersolution: ordering must fail."""

    n = 3
    domain = (0.05, 2.0)

    def __call__(self, s):
        s = np.atleast_1d(np.asarray(s, dtype=float))
        return 0.05 + 0.9 * np.exp(-(s / 0.5) ** 2)


def test_comparison_detects_violation():
    psi = Bump()
    t0, t1 = -0.5, -0.3
    r = np.linspace(psi.domain[0] * 1.0 + 1e-9, math.sqrt(0.6), 300)
    init = RadialProfile(3, r, 0.99 * psi(r))
    rep = comparison_test(init, psi, t0, t1, dt=1e-3)
    assert rep.precondition_ok and not rep.ordering_ok
    v = rep.first_violation
    assert t0 < v["t"] <= t1 and r[0] <= v["r"] <= r[-1]
    assert v["margin"] < 0 and v["D_at_s"] is None


def test_comparison_precondition():
    psi = Bump()
    r = np.linspace(0.06, 0.7, 100)
    init = RadialProfile(3, r, 1.01 * psi(r))
    rep = comparison_test(init, psi, -0.5, -0.3)
    assert not rep.precondition_ok and rep.precondition_violation["u"] > rep.precondition_violation["psi"]


def test_comparison_domain_checked():
    psi = Bump()
    r = np.linspace(0.01, 0.7, 100)
    with pytest.raises(ValueError):
        comparison_test(RadialProfile(3, r, 0.5 * np.ones(100)), psi, -0.5, -0.3)
    with pytest.raises(ValueError):
        comparison_test(RadialProfile(3, r + 0.05, 0.5 * np.ones(100)), psi, -0.3, -0.5)


def test_comparison_with_barrier_n5(get_barrier):
    psi = get_barrier(5)
    t0, t1 = -0.5, -0.4
    r = np.geomspace(psi.domain[0] * math.sqrt(-2 * t0), math.sqrt(3) * math.sqrt(-2 * t1), 1500)
    init = RadialProfile(5, r, 0.9 * psi(r / math.sqrt(-2 * t0)))
    rep = comparison_test(init, psi, t0, t1, dt=1e-3)
    assert rep.precondition_ok and rep.ordering_ok and rep.min_margin > 0


# -- arclength form -------------------------------------------------------------

def test_arclength_of_round_sphere():
    # on u = 1 - r^2, z = arcsin(rho) - arcsin(r_bar), so F(z) = sin(arcsin r_bar + z)
    r = np.linspace(1e-3, 0.95, 4000)
    p = arclength_profile(RadialProfile(4, r, 1 - r**2), math.sin(math.pi / 4))
    z = np.linspace(-0.5, 0.3, 9)
    np.testing.assert_allclose(p.F_of(z), np.sin(math.pi / 4 + z), rtol=1e-8)
    np.testing.assert_allclose(p.F_z(z), np.cos(math.pi / 4 + z), rtol=1e-6)
    np.testing.assert_allclose(p.F_zz(z), -np.sin(math.pi / 4 + z), rtol=1e-5)
    np.testing.assert_allclose(p.z_of(np.sin(math.pi / 4 + z)), z, atol=1e-10)


def _f_residual(cells):
    n, rho0, dt = 4, 2.0, 0.02 * 40 / cells
    st = sphere_run(n=n, cells=cells, dt=dt, t_final=0.2, rho0=rho0)
    rb = follow_marked_radius(st, 0.5)
    z = np.linspace(-0.2, 0.2, 9)
    return st, rb, float(np.max(np.abs(f_equation_residual(st, rb, z))))


def test_f_equation_second_order():
    res = [_f_residual(c)[2] for c in (40, 80, 160)]
    assert res[-1] < 1e-5
    assert min(a / b for a, b in zip(res, res[1:])) > 3.5


def test_marked_radius_follows_exact_scaling():
    # on the shrinking sphere a fixed point keeps its angle, so r_bar is
    # proportional to the sphere radius; the trapezoidal march is second order
    errs = []
    for cells in (40, 80, 160):
        st, rb, _ = _f_residual(cells)
        rho = np.sqrt(4.0 - 2 * 3 * np.asarray(st.times))
        errs.append(np.max(np.abs(rb / (0.5 * rho / 2.0) - 1)))
    assert errs[-1] < 1e-5
    assert min(a / b for a, b in zip(errs, errs[1:])) > 3.5


def test_f_equation_rejects_non_solution():
    st = sphere_run(cells=80, dt=0.005, t_final=0.2)
    # freeze the profile in time: F_t = 0 and the residual is O(1)
    frozen = FlowState(st.n, st.times, [st.profiles[0]] * len(st.times), st.boundary)
    rb = np.full(len(st.times), 0.5)
    res = f_equation_residual(frozen, rb, np.linspace(-0.2, 0.2, 9))
    assert np.max(np.abs(res)) > 0.1


def test_f_equation_argument_checks():
    st = sphere_run(cells=20, dt=0.05, t_final=0.1)
    with pytest.raises(ValueError):
        f_equation_residual(st, np.full(len(st.times) - 1, 0.5), [0.0])
    with pytest.raises(ValueError):
        f_equation_residual(st, np.full(len(st.times), 0.5), [0.0], index=0)


def test_rescaled_profile_on_sphere():
    """The rescaled G on a shrinking sphere: G_xi > 0 on the arc and G_xixi <= 0."""
    st = sphere_run(n=4, cells=80, dt=0.005, t_final=0.2)
    # shift time so the stored window brackets t = -e^{-tau}
    seq = [arclength_profile(p, 0.5, t - 0.9) for p, t in zip(st.profiles, st.times)]
    tau = -math.log(0.8)
    rp = rescaled_profile(seq, tau, np.linspace(-0.3, 0.3, 7))
    assert np.all(rp.G_xi > 0) and np.all(rp.G_xixi <= 0)
    assert rp.interpolation_error < 1e-4
    with pytest.raises(ValueError):
        rescaled_profile(seq, 5.0, [0.0])
