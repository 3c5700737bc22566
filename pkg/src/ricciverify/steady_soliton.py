"""The rotationally symmetric steady soliton that is singular at the tip.

Writing the soliton as u^{-1} dr^2 + r^2 g_{S^{n-1}} with u = phi(r), the
variables x = r^2, y = phi and z = r phi'/2 satisfy the quadratic first
integral

    C x y = -(n-2) y^2 - 2 y z + z^2 - (n-3)(n-2) y - 2(n-2) z + (n-2)^2,

and y' = z / x along a solution. With the scale fixed by C = 1 we solve the
quadratic for z on the branch that vanishes as x -> oo, which leaves a scalar
first-order ODE for y with the conservation law built in.

Integration runs outward from the singular tip, where y ~ c x^{-(sqrt(n-1)-1)}.
Every solution of the branch collapses onto the same asymptotic expansion
y = sum_j c_j x^{-j} at a rate exp(-x / (2(n-2))), so marching outward is
stable, whereas marching inward from asymptotic data amplifies errors by the
same factor. Far out, values come from the (optimally truncated) expansion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import bisect

from .warped_geometry import RadialProfile


class SolitonError(RuntimeError):
    """Integration of the soliton branch failed; carries the reachable range."""

    def __init__(self, msg, reachable=None):
        super().__init__(msg)
        self.reachable = reachable


class RangeError(ValueError):
    """A requested quantity lies outside the computed radial range."""


def branch_z(x, y, n):
    """Root of the first-integral quadratic (C = 1) that tends to 0 as x -> oo.

    Written in rationalized form; the direct difference of the two O(1) terms
    loses all digits once y is small.
    """
    k = n - 2
    s = np.sqrt(y * ((n - 1) * (y + k) + x))
    return (k * k - k * y * y - k * (n - 3) * y - x * y) / ((y + k) + s)


def branch_jets(r, y, n):
    """phi, phi_r, phi_rr of the solution through (r, phi = y).

    Derivatives come from the first integral and the chain rule, so they are
    exactly those of the ODE solution passing through the given point.
    """
    r = np.asarray(r, dtype=float)
    y = np.asarray(y, dtype=float)
    k = n - 2
    x = r * r
    s = np.sqrt(y * ((n - 1) * (y + k) + x))
    z = branch_z(x, y, n)
    z_x = -y / (2 * s)
    z_y = 1 - (2 * (n - 1) * y + (n - 1) * k + x) / (2 * s)
    phi_r = 2 * z / r
    z_r = 2 * r * z_x + z_y * phi_r
    phi_rr = 2 * z_r / r - 2 * z / r**2
    return y, phi_r, phi_rr


def first_integral_rhs(y, z, n):
    k = n - 2
    return -k * y * y - 2 * y * z + z * z - (n - 3) * k * y - 2 * k * z + k * k


@lru_cache(maxsize=None)
def asymptotic_coefficients(n: int, terms: int = 60) -> tuple:
    """Coefficients c_1..c_terms of y = sum c_j x^{-j} on the C = 1 level set.

    Integer recursion from substituting the series (and z = x y') into the
    first integral; exact for integer n.
    """
    k = n - 2
    c = [0] * (terms + 2)
    c[1] = k * k
    for m in range(1, terms):
        y = c[: m + 1]
        z = [-j * c[j] for j in range(m + 1)]
        conv = lambda a, b: sum(a[i] * b[m - i] for i in range(m + 1))
        c[m + 1] = (-k * conv(y, y) - 2 * conv(y, z) + conv(z, z)
                    - (n - 3) * k * y[m] - 2 * k * z[m])
    return tuple(c[1: terms + 1])


def asymptotic_series(r, n, rel=1e-17):
    """phi, phi_r, phi_rr from the optimally truncated large-r expansion.

    Returns (phi, phi_r, phi_rr, converged) where ``converged`` marks points
    at which the smallest retained term dropped below ``rel`` times the sum.
    """
    r = np.atleast_1d(np.asarray(r, dtype=float))
    coeffs = asymptotic_coefficients(int(n))
    out = np.empty((3, r.size))
    ok = np.zeros(r.size, dtype=bool)
    for i, ri in enumerate(r):
        x = ri * ri
        y = yx = yxx = 0.0
        last = math.inf
        for j, cj in enumerate(coeffs, start=1):
            term = float(cj) * x ** (-j)
            if abs(term) > last and cj != 0:
                break  # series started to diverge
            y += term
            yx += -j * term / x
            yxx += j * (j + 1) * term / (x * x)
            if cj != 0:
                last = abs(term)
            if last <= rel * abs(y):
                ok[i] = True
                break
        else:
            ok[i] = all(c == 0 for c in coeffs[1:]) or last <= rel * abs(y)
        out[:, i] = y, 2 * ri * yx, 2 * yx + 4 * x * yxx
    return out[0], out[1], out[2], ok


def steady_operator(r, phi, phi_r, phi_rr, n, relative=True):
    """Residual of the steady equation phi phi'' - phi'^2/2 + ... = 0.

    With ``relative`` the residual is divided by the sum of absolute values of
    its terms, which keeps it meaningful near the tip where phi is huge.
    """
    k = n - 2
    terms = np.array([
        phi * phi_rr,
        -0.5 * phi_r**2,
        k * phi_r / r,
        -phi * phi_r / r,
        2 * k / r**2 * phi * (1 - phi),
    ])
    res = terms.sum(axis=0)
    if relative:
        res = res / np.abs(terms).sum(axis=0)
    return res


@dataclass
class FirstIntegralState:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray


def first_integral_residual(state: FirstIntegralState, n: int, C: float = 1.0,
                            relative: bool = True) -> np.ndarray:
    """Pointwise defect of the first integral with constant C.

    ``relative`` divides by the largest term magnitude (at least 1) so the
    value measures lost digits rather than the size of y^2 near the tip.
    """
    x, y, z = (np.asarray(a, dtype=float) for a in (state.x, state.y, state.z))
    k = n - 2
    res = C * x * y - first_integral_rhs(y, z, n)
    if not relative:
        return res
    scale = np.max(np.abs([C * x * y, k * y * y, 2 * y * z, z * z,
                           (n - 3) * k * y, 2 * k * z, np.full_like(y, k * k)]), axis=0)
    return res / np.maximum(scale, 1.0)


@dataclass
class SolitonProfile:
    """Sampled singular steady soliton, with an evaluator valid on (r_min, oo)."""

    n: int
    r: np.ndarray
    phi: np.ndarray
    phi_r: np.ndarray
    phi_rr: np.ndarray
    normalization: float = 1.0
    r_star: float | None = None
    c_tip: float = 1.0
    r_min: float = 0.0        # smallest radius reached (the tip start)
    r_ode_max: float = 0.0    # outer end of the integrated range
    tol: float = 1e-10
    nfev: int = 0
    _dense: object = field(default=None, repr=False)

    def state(self) -> FirstIntegralState:
        return FirstIntegralState(self.r**2, self.phi, 0.5 * self.r * self.phi_r)

    def jets(self, r):
        """phi, phi_r, phi_rr at arbitrary radii in (r_min, oo)."""
        r = np.atleast_1d(np.asarray(r, dtype=float))
        if np.any(r < self.r_min * (1 - 1e-12)):
            raise RangeError(f"radius below the reachable range (r_min = {self.r_min:g})")
        out = np.empty((3, r.size))
        inner = r <= self.r_ode_max
        if inner.any():
            y = self._dense(np.log(r[inner] ** 2))[0]
            out[:, inner] = branch_jets(r[inner], y, self.n)
        if (~inner).any():
            p, pr, prr, ok = asymptotic_series(r[~inner], self.n)
            if not ok.all():
                raise RangeError("asymptotic expansion not converged; extend the integration range")
            out[:, ~inner] = p, pr, prr
        return out[0], out[1], out[2]

    def __call__(self, r):
        return self.jets(r)[0]

    def steady_residual(self) -> np.ndarray:
        return steady_operator(self.r, self.phi, self.phi_r, self.phi_rr, self.n)

    def to_radial(self) -> RadialProfile:
        return RadialProfile(self.n, self.r, self.phi, self.phi_r, self.phi_rr,
                             meta={"kind": "singular_steady", "C": self.normalization})


def tip_exponent(n: int) -> float:
    return math.sqrt(n - 1) - 1


def tip_start(n: int, c_tip: float, phi_cap: float) -> float:
    """x at which the tip solution y ~ c_tip x^{-alpha} + y_p reaches phi_cap."""
    alpha = tip_exponent(n)
    y_p = (n - 2) * (1 - math.sqrt(n - 1) / 2) / alpha
    return (c_tip / (phi_cap - y_p)) ** (1 / alpha)


def solve_singular_soliton(n: int, r_range: tuple[float, float] | None = None,
                           tol: float = 1e-10, c_tip: float = 1.0, phi_cap: float = 1e6,
                           samples: int = 2000) -> SolitonProfile:
    """Integrate the C = 1 branch outward from the tip.

    The member of the family is fixed by its tip behaviour
    phi ~ c_tip r^{-2(sqrt(n-1)-1)}; integration starts where phi = phi_cap.
    ``r_range`` selects the sampled window (log-spaced); the dense solution
    is kept so :meth:`SolitonProfile.jets` works anywhere past the tip.
    """
    if n < 3:
        raise ValueError("n must be >= 3")
    k = n - 2
    x0 = tip_start(n, c_tip, phi_cap)
    r0 = math.sqrt(x0)
    if r_range is None:
        r_range = (r0, 40.0 * math.sqrt(k))
    lo, hi = r_range
    if lo < r0:
        raise SolitonError(f"r_range starts inside the tip cap (phi > {phi_cap:g})", (r0, None))
    # the expansion is converged to machine precision beyond ~30 sqrt(k)
    r_end = max(hi, 30.0 * math.sqrt(k))

    def rhs(t, Y):
        return [branch_z(math.exp(t), Y[0], n)]

    def hit_zero(t, Y):
        return Y[0]
    hit_zero.terminal = True

    t0, t1 = math.log(x0), math.log(r_end**2)
    # explicit high order while the branch is non-stiff, implicit beyond
    t_mid = min(t1, math.log((40.0 * math.sqrt(k)) ** 2))
    legs = [(t0, t_mid, "DOP853")]
    if t1 > t_mid:
        legs.append((t_mid, t1, "Radau"))
    sols, y_start, nfev = [], phi_cap, 0
    for a, b, method in legs:
        sol = solve_ivp(rhs, (a, b), [y_start], method=method, rtol=tol, atol=1e-300,
                        dense_output=True, events=hit_zero)
        nfev += sol.nfev
        if sol.status != 0:
            reach = (r0, math.sqrt(math.exp(sol.t[-1])))
            raise SolitonError(f"branch left y > 0 (status {sol.status}: {sol.message})", reach)
        sols.append(sol)
        y_start = sol.y[0, -1]

    breaks = [s.t[-1] for s in sols[:-1]]

    def dense(t):
        t = np.atleast_1d(t)
        out = np.empty((1, t.size))
        idx = np.searchsorted(breaks, t, side="right")
        for i, s in enumerate(sols):
            m = idx == i
            if m.any():
                out[:, m] = s.sol(t[m])
        return out

    r = np.geomspace(lo, hi, samples)
    y = dense(np.log(r**2))[0]
    if np.any(y <= 0):
        raise SolitonError("non-positive phi in the sampled range", (r0, r_end))
    phi, phi_r, phi_rr = branch_jets(r, y, n)
    prof = SolitonProfile(n, r, phi, phi_r, phi_rr, 1.0, None, c_tip, r0, r_end, tol, nfev, dense)
    try:
        prof.r_star = locate_r_star(prof)
    except RangeError:
        pass
    return prof


def locate_r_star(profile: SolitonProfile, tol: float = 1e-12, level: float = 2.0) -> float:
    """Radius where phi = level (default 2), by bisection on the monotone profile."""
    f = lambda r: profile(r)[0] - level
    lo, hi = float(profile.r[0]), float(profile.r[-1])
    flo, fhi = f(lo), f(hi)
    if flo * fhi > 0:
        raise RangeError(f"phi - {level:g} has no sign change on [{lo:g}, {hi:g}]; extend the range")
    root = bisect(f, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=400)
    if abs(f(root)) > tol:
        raise RangeError(f"bisection stalled: |phi(r*) - {level:g}| = {abs(f(root)):.3e}")
    return root


@dataclass
class AsymptoticFit:
    coeffs: np.ndarray          # c2, c4[, c6, ...]
    expected: tuple[float, float]
    rel_err_c2: float
    err_c4: float               # relative, or absolute when the expected value is 0
    window: tuple[float, float]

    @property
    def c2(self):
        return float(self.coeffs[0])

    @property
    def c4(self):
        return float(self.coeffs[1])


def expected_coefficients(n: int) -> tuple[float, float]:
    k = n - 2
    return float(k * k), float(-(n - 5) * k**3)


def fit_asymptotics(profile: SolitonProfile, window: tuple[float, float],
                    terms: int = 3, min_points: int = 20) -> AsymptoticFit:
    """Least-squares fit phi ~ c2 r^-2 + c4 r^-4 (+ c6 r^-6 ...) on sampled data.

    Only integrated samples are used (never the built-in expansion). The
    extra terms absorb truncation bias; they are returned but not judged.
    """
    lo, hi = window
    mask = (profile.r >= lo) & (profile.r <= hi)
    if mask.sum() < max(min_points, terms + 3) or hi / lo < 1.5:
        raise ValueError("fit window too small for a conditioned fit")
    r, phi = profile.r[mask], profile.phi[mask]
    k2, c4_exp = expected_coefficients(profile.n)
    if np.max(np.abs(r**2 * phi / k2 - 1)) > 0.1:
        raise ValueError("window not in the asymptotic regime (r^2 phi off by > 10%)")
    # fit r^2 phi = c2 + c4 r^-2 + ... with columns scaled for conditioning
    w = r ** -2.0
    A = np.column_stack([(w / w.max()) ** j for j in range(terms)])
    sol, *_ = np.linalg.lstsq(A, r**2 * phi, rcond=None)
    coeffs = sol / w.max() ** np.arange(terms)
    err_c4 = abs(coeffs[1] - c4_exp) / abs(c4_exp) if c4_exp else abs(coeffs[1])
    return AsymptoticFit(coeffs, (k2, c4_exp), abs(coeffs[0] / k2 - 1), err_c4, (lo, hi))


def integrate_first_integral_system(n: int, y0: float, z0: float, t_span: tuple[float, float],
                                    steps: int) -> FirstIntegralState:
    """Classical RK4 on the unconstrained (y, z) system in t = log x.

    dy/dt = z and dz/dt = (z^2 + 2yz + (n-2)y^2 - (n-2)z - (n-2)y) / (2y).
    The first integral is not enforced, so its drift measures the
    integrator's error; used for convergence studies.
    """
    k = n - 2

    def f(Y):
        y, z = Y
        return np.array([z, (z * z + 2 * y * z + k * y * y - k * z - k * y) / (2 * y)])

    t = np.linspace(t_span[0], t_span[1], steps + 1)
    h = t[1] - t[0]
    Y = np.empty((steps + 1, 2))
    Y[0] = y0, z0
    for i in range(steps):
        k1 = f(Y[i])
        k2 = f(Y[i] + 0.5 * h * k1)
        k3 = f(Y[i] + 0.5 * h * k2)
        k4 = f(Y[i] + h * k3)
        Y[i + 1] = Y[i] + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return FirstIntegralState(np.exp(t), Y[:, 0], Y[:, 1])
