"""Per-module invariant suites shared by the command-line interface.

Each suite returns a :class:`SuiteResult` whose ``checks`` map a check name to
a dict with at least a boolean ``passed`` entry and the measured margins, and
whose ``tables`` hold (header, rows) pairs written out as CSV files.
Wall-clock timings are kept out of the results so that reports are
byte-for-byte reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import barrier, flow_evolution, l_geometry, shrinker_density, steady_soliton
from .warped_geometry import RadialProfile, hamilton_quantity


@dataclass
class SuiteResult:
    name: str
    checks: dict
    tables: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c["passed"] for c in self.checks.values())

    def to_dict(self) -> dict:
        return {"module": self.name, "passed": self.passed, "checks": self.checks, "info": self.info}


def _check(passed, **info) -> dict:
    return {"passed": bool(passed), **info}


# -- shrinker densities -----------------------------------------------------------

def density_suite(n_max: int = 50, rtol: float = 1e-12) -> SuiteResult:
    scan = shrinker_density.density_scan(n_max, rtol)
    checks = {name: _check(c["pass"], value=c["value"]) for name, c in scan.checks.items()}
    for n, exact in ((2, 2 / math.e), (3, 2 * math.sqrt(math.pi) * math.exp(-1.5))):
        v = shrinker_density.density_sphere(n)
        err = abs(v / exact - 1)
        checks[f"closed_value_S{n}"] = _check(err <= rtol, value=v, exact=exact, rel_err=err)
    rows = [(int(n), c, o, g) for n, c, o, g in scan.rows()]
    return SuiteResult("density", checks, {"density_scan": (["n", "closed_form", "integral", "gap"], rows)})


# -- steady soliton ----------------------------------------------------------------

def soliton_check(n: int, tol: float = 1e-10, fit_tol: float = 0.01,
                  residual_tol: float = 1e-8) -> tuple[dict, dict]:
    """Asymptotic fit on [30, 200] sqrt(n-2) and the first-integral residual."""
    k = n - 2
    window = (30.0 * math.sqrt(k), 200.0 * math.sqrt(k))
    prof = steady_soliton.solve_singular_soliton(n, tol=tol)
    full = steady_soliton.solve_singular_soliton(n, r_range=(prof.r_min, window[1]), tol=tol)
    fit = steady_soliton.fit_asymptotics(full, window)
    res = float(np.max(np.abs(steady_soliton.first_integral_residual(prof.state(), n))))
    c4_scale = abs(fit.expected[1]) if fit.expected[1] else float(k**3)
    c4_err = abs(fit.c4 - fit.expected[1]) / c4_scale
    checks = {
        "c2": _check(fit.rel_err_c2 <= fit_tol, value=fit.c2, expected=fit.expected[0],
                     rel_err=fit.rel_err_c2),
        "c4": _check(c4_err <= fit_tol, value=fit.c4, expected=fit.expected[1], rel_err=c4_err,
                     scale=c4_scale),
        "first_integral": _check(res <= residual_tol, max_residual=res),
        "monotone": _check(bool(np.all(np.diff(prof.phi) < 0)), points=int(prof.r.size)),
    }
    info = {"r_star": prof.r_star, "r_min": prof.r_min, "window": list(window)}
    return checks, info


def identity_check(n: int, soliton=None, r_range=None, points: int = 400) -> dict:
    """R + v^2/u along the soliton: spread under grid halving and lim r^2 u H."""
    sol = soliton or steady_soliton.solve_singular_soliton(n)
    lo, hi = r_range or (sol.r_star, 10 * sol.r_star)
    spreads = []
    for m in (points, 2 * points, 4 * points):
        r = np.linspace(lo, hi, m)
        # finite-difference derivatives, so the spread measures the O(h^2) error
        H = hamilton_quantity(RadialProfile(n, r, sol(r))).H
        spreads.append(float(np.max(H) - np.min(H)))
    ratios = [a / b for a, b in zip(spreads, spreads[1:])]
    r = np.linspace(lo, hi, 4 * points)
    H = float(np.median(hamilton_quantity(RadialProfile(n, r, sol(r))).H))
    r_far = 1e4 * math.sqrt(n - 2)
    limit = float(r_far**2 * sol(r_far)[0] * H)
    k2 = (n - 2) ** 2
    err = abs(limit / k2 - 1)
    return {
        "hamilton_constant": _check(min(ratios) >= 3.5, spreads=spreads, ratios=ratios, H=H),
        "r2u_limit": _check(err <= 0.01, value=limit, expected=float(k2), rel_err=err, r=r_far),
    }


def soliton_suite(ns=(4, 5, 6), tol: float = 1e-10) -> SuiteResult:
    checks, info, rows = {}, {}, []
    for n in ns:
        c, i = soliton_check(n, tol)
        c.update(identity_check(n))
        checks.update({f"n{n}.{k}": v for k, v in c.items()})
        info[f"n{n}"] = i
        rows.append((n, c["c2"]["value"], c["c4"]["value"], c["first_integral"]["max_residual"],
                     i["r_star"]))
    return SuiteResult("soliton", checks,
                       {"soliton_fits": (["n", "c2", "c4", "first_integral_residual", "r_star"], rows)},
                       info)


# -- barrier ---------------------------------------------------------------------------

def zeta_checks(ns=range(4, 11), rtol: float = 1e-8, limit_rtol: float = 0.005) -> dict:
    checks = {}
    for n in ns:
        z = barrier.compute_zeta(n)
        k = n - 2
        val = float(np.atleast_1d(z.evaluate(z.s0)[0])[0])
        exact = k * (n - 19 / 4)
        err = abs(val / exact - 1)
        lim = z.small_s_limit()
        lim_exact = 5 * k**2.5
        lerr = abs(lim / lim_exact - 1)
        checks[f"n{n}.zeta_at_s0"] = _check(err <= rtol, value=val, exact=exact, rel_err=err)
        checks[f"n{n}.zeta_small_s"] = _check(lerr <= limit_rtol, value=lim, exact=lim_exact,
                                              rel_err=lerr)
    return checks


def barrier_suite(ns=(4, 5, 6), a: float | None = None, find_min: bool = False,
                  points: int = 3000) -> SuiteResult:
    """Verify psi_a at a = 2 A_min (reference thresholds) or search A_min afresh."""
    checks = zeta_checks()
    info, rows = {}, []
    for n in ns:
        sol = steady_soliton.solve_singular_soliton(n)
        zeta = barrier.compute_zeta(n)
        if find_min:
            search = barrier.find_min_a(n, soliton=sol, zeta=zeta)
            rep, A_min, N = search.report, search.A_min, search.N
            info[f"n{n}"] = {"A_min": A_min, "N": N, "search_steps": len(search.history)}
        else:
            A_min, factor = barrier.REFERENCE_THRESHOLDS[n]
            N = factor * sol.r_star
            aa = a if a is not None else 2 * A_min
            rep = barrier.verify_barrier(barrier.build_barrier(n, aa, N, sol, zeta), points)
            info[f"n{n}"] = {"A_min_reference": A_min, "a": aa, "N": N}
        for name, c in rep.checks.items():
            checks[f"n{n}.{name}"] = c
        rows.append((n, rep.a, rep.N, rep.r_star, rep.theta, rep.checks["negativity"]["max_D"]))
    return SuiteResult("barrier", checks,
                       {"barrier": (["n", "a", "N", "r_star", "theta", "max_D"], rows)}, info)


# -- flow evolution --------------------------------------------------------------------

def comparison_check(n: int, factor: float = 0.9, t0: float = -0.5, t1: float = -0.4,
                     points: int = 6000, dt: float = 1e-3) -> dict:
    """Evolve factor * psi_a(r / sqrt(-2 t0)) with a = 2 A_min and test the ordering."""
    A_min, f = barrier.REFERENCE_THRESHOLDS[n]
    sol = steady_soliton.solve_singular_soliton(n)
    psi = barrier.build_barrier(n, 2 * A_min, f * sol.r_star, sol)
    lo = psi.domain[0] * math.sqrt(-2 * t0)
    hi = math.sqrt(n - 2) * math.sqrt(-2 * t1)
    r = np.geomspace(lo, hi, points)
    init = RadialProfile(n, r, factor * psi(r / math.sqrt(-2 * t0)))
    rep = flow_evolution.comparison_test(init, psi, t0, t1, dt=dt)
    return _check(rep.precondition_ok and rep.ordering_ok, min_margin=rep.min_margin,
                  first_violation=rep.first_violation, domain=list(rep.domain), a=psi.a)


def flow_suite(refine: int = 3, cells: int = 20, dt: float = 0.01, n: int = 3,
               comparison_ns=(4, 5)) -> SuiteResult:
    rows = flow_evolution.sphere_convergence(n=n, cells=cells, dt=dt, refinements=refine)
    ratios = [r.ratio for r in rows[1:]]
    checks = {"sphere_convergence": _check(min(ratios) >= 3.5, ratios=ratios,
                                           errors=[r.error for r in rows])}
    # maximum principle on admissible sphere data
    r = flow_evolution.cell_grid(1.0, 40)
    cfg = flow_evolution.StepperConfig(
        0.005, outer_data=lambda t, R=r[-1]: flow_evolution.sphere_profile_exact(R, t, n, 2.0))
    st = flow_evolution.evolve(RadialProfile(n, r, flow_evolution.sphere_profile_exact(r, 0, n, 2.0)),
                               0.5, cfg)
    mp = st.checks["max_principle"]
    checks["max_principle"] = {**mp, "passed": mp["passed"] and mp["applies"]}
    sol = steady_soliton.solve_singular_soliton(4)
    stat = flow_evolution.soliton_stationarity(sol)
    checks["soliton_stationarity"] = _check(stat.passed, defect=stat.defect, drift=stat.drift,
                                            drift_per_time=stat.drift_per_time)
    for m in comparison_ns:
        checks[f"comparison_n{m}"] = comparison_check(m)
    table = (["cells", "dt", "error", "ratio"],
             [(r.cells, r.dt, r.error, math.nan if r.ratio is None else r.ratio) for r in rows])
    return SuiteResult("flow", checks, {"sphere_convergence": table})


# -- reduced geometry ------------------------------------------------------------------

def lgeo_suite(n: int = 4, taus=(1.0, 10.0, 100.0), seed: int = 0, tol: float = 1e-6) -> SuiteResult:
    checks, rows = {}, []
    flat = l_geometry.ModelFlow("flat", n)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for tau in taus:
        x = rng.normal(size=n)
        cfg = l_geometry.PathOptConfig(perturb=0.1, seed=seed)
        got = l_geometry.reduced_distance(flat, np.zeros(n), x, tau, config=cfg).value
        exact = float(x @ x) / (4 * tau)
        worst = max(worst, abs(got / exact - 1))
    checks["flat_distance"] = _check(worst <= tol, max_rel_err=worst)
    for kind in ("flat", "shrinking_sphere", "shrinking_cylinder"):
        flow = l_geometry.ModelFlow(kind, n)
        rep = l_geometry.check_l_bounds(flow, taus, tol=tol)
        vols = [r.volume for r in rep.rows]
        checks[f"{kind}.min_l"] = _check(all(r.min_l_ok for r in rep.rows),
                                         min_l=[r.min_l for r in rep.rows], bound=n / 2)
        checks[f"{kind}.volume_range"] = _check(all(0 < v <= 1 + 1e-8 for v in vols), volumes=vols)
        checks[f"{kind}.volume_monotone"] = _check(rep.volume_monotone, volumes=vols)
        for r in rep.rows:
            rows.append((kind, r.tau, r.min_l, r.c, r.C, r.gradient_C, r.volume))
    cyl = l_geometry.ModelFlow("shrinking_cylinder", n)
    v = l_geometry.reduced_volume(cyl, 100.0).value
    target = shrinker_density.cylinder_density(n)
    err = abs(v / target - 1)
    checks["cylinder_asymptotic_volume"] = _check(err <= 0.01, value=v, target=target, rel_err=err)
    return SuiteResult("lgeo", checks, {"l_bounds": (["model", "tau", "min_l", "c", "C",
                                                       "gradient_C", "volume"], rows)})


SUITES = {"density": density_suite, "soliton": soliton_suite, "barrier": barrier_suite,
          "flow": flow_suite, "lgeo": lgeo_suite}
