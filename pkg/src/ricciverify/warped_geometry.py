"""Curvature of rotationally symmetric metrics g = u^{-1} dr^2 + r^2 g_{S^{n-1}}.

All quantities are computed from a sampled profile u(r). Derivatives that
are not supplied are taken by second-order finite differences, which also
work on nonuniform grids (one-sided at the ends).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io

MIN_POINTS = 8


class ProfileError(ValueError):
    """Raised for profiles that cannot carry the warped-product geometry."""


def fd_derivative(f: np.ndarray, r: np.ndarray) -> np.ndarray:
    return np.gradient(f, r, edge_order=2)


@dataclass(frozen=True)
class RadialProfile:
    """Warped-product coefficient u sampled on a radial grid.

    ``nonneg_curvature`` declares that the profile comes from a metric with
    nonnegative curvature operator, which requires 0 < u <= 1 and u_r <= 0.
    """

    n: int
    r: np.ndarray
    u: np.ndarray
    u_r: np.ndarray | None = None
    u_rr: np.ndarray | None = None
    nonneg_curvature: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        r = np.asarray(self.r, dtype=float)
        u = np.asarray(self.u, dtype=float)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "u", u)
        if self.n < 3:
            raise ProfileError(f"dimension must be >= 3, got {self.n}")
        if r.ndim != 1 or r.shape != u.shape:
            raise ProfileError("r and u must be 1-D arrays of equal length")
        if r.size < MIN_POINTS:
            raise ProfileError(f"need at least {MIN_POINTS} grid points, got {r.size}")
        if r[0] <= 0 or np.any(np.diff(r) <= 0):
            raise ProfileError("grid must be strictly increasing with r > 0")
        if self.u_r is None:
            object.__setattr__(self, "u_r", fd_derivative(u, r))
        else:
            object.__setattr__(self, "u_r", np.asarray(self.u_r, dtype=float))
        if self.u_rr is None:
            object.__setattr__(self, "u_rr", fd_derivative(self.u_r, r))
        else:
            object.__setattr__(self, "u_rr", np.asarray(self.u_rr, dtype=float))
        if self.nonneg_curvature:
            if np.any(u <= 0) or np.any(u > 1 + 1e-12):
                raise ProfileError("nonnegative-curvature profile needs 0 < u <= 1")
            if np.any(self.u_r > 1e-10 * max(1.0, float(np.max(np.abs(self.u_r))))):
                raise ProfileError("nonnegative-curvature profile needs u_r <= 0")

    @classmethod
    def from_function(cls, n, r, func, dfunc=None, d2func=None, **kw):
        r = np.asarray(r, dtype=float)
        return cls(n, r, func(r),
                   None if dfunc is None else dfunc(r),
                   None if d2func is None else d2func(r), **kw)

    def to_csv(self, path, **meta) -> Path:
        header = ["r", "u", "u_r", "u_rr"]
        rows = zip(self.r, self.u, self.u_r, self.u_rr)
        return io.write_csv(path, header, rows, {"n": self.n, **self.meta, **meta})

    @classmethod
    def from_csv(cls, path, **kw) -> "RadialProfile":
        meta, header, cols = io.read_csv(path)
        if "n" not in meta:
            raise ProfileError(f"{path}: missing '# n=<dim>' metadata line")
        if "r" not in cols or "u" not in cols:
            raise ProfileError(f"{path}: need columns r,u")
        n = int(meta.pop("n"))
        return cls(n, cols["r"], cols["u"], cols.get("u_r"), cols.get("u_rr"), meta=meta, **kw)


@dataclass(frozen=True)
class CurvatureFields:
    ric_rad: np.ndarray  # coefficient of dr (x) dr
    ric_sph: np.ndarray  # coefficient of g_{S^{n-1}}
    R: np.ndarray
    v: np.ndarray        # soliton vector field V = v d/dr

    def trace_scalar(self, profile: RadialProfile) -> np.ndarray:
        """Scalar curvature assembled as the metric trace of the Ricci tensor."""
        n, r, u = profile.n, profile.r, profile.u
        return u * self.ric_rad + (n - 1) * self.ric_sph / r**2


def _require_positive(profile: RadialProfile) -> None:
    bad = np.flatnonzero(profile.u <= 0)
    if bad.size:
        i = bad[0]
        raise ProfileError(f"u must be positive; u({profile.r[i]:g}) = {profile.u[i]:g}")


def curvature_fields(profile: RadialProfile) -> CurvatureFields:
    _require_positive(profile)
    n, r, u, ur = profile.n, profile.r, profile.u, profile.u_r
    ric_rad = -(n - 1) / (2 * r) * ur / u
    ric_sph = (n - 2) * (1 - u) - 0.5 * r * ur
    R = (n - 1) / r**2 * ((n - 2) * (1 - u) - r * ur)
    v = ric_sph / r
    return CurvatureFields(ric_rad, ric_sph, R, v)


@dataclass(frozen=True)
class HamiltonQuantity:
    H: np.ndarray           # R + v^2/u summed from its parts
    H_closed: np.ndarray    # same quantity from the closed-form identity
    H_r: np.ndarray
    evolution_residual: np.ndarray | None = None


def hamilton_closed_form(n, r, u, ur):
    return ((n - 2 + u - 0.5 * r * ur) ** 2 / (u * r**2)
            - (n - 1) * (n - 2 + u) / r**2)


def hamilton_quantity(profile: RadialProfile, u_t: np.ndarray | None = None) -> HamiltonQuantity:
    """R + u^{-1} v^2, which is constant in r on a steady soliton.

    With ``u_t`` supplied, also returns the residual of
    H_r + (n-1)/r (1 + r v / ((n-1) u)) u_t / u, which vanishes on any solution
    of the flow.
    """
    _require_positive(profile)
    cf = curvature_fields(profile)
    n, r, u, ur = profile.n, profile.r, profile.u, profile.u_r
    H = cf.R + cf.v**2 / u
    Hc = hamilton_closed_form(n, r, u, ur)
    H_r = fd_derivative(H, r)
    res = None
    if u_t is not None:
        u_t = np.asarray(u_t, dtype=float)
        res = H_r + (n - 1) / r * (1 + r / (n - 1) * cf.v / u) * u_t / u
    return HamiltonQuantity(H, Hc, H_r, res)


@dataclass
class NeckReport:
    eps: float
    necks: list[tuple[float, float]]
    neck_lengths: list[float]        # length in units of the sphere radius
    cap: list[tuple[float, float]]
    cap_diameter: float              # metric length of the cap region
    note: str = ("stand-in eps-neck criterion: u < eps on an interval whose length, "
                 "measured in units of the local sphere radius, is >= 1/eps")


def _runs(mask: np.ndarray):
    """Index ranges [i, j] (inclusive) of maximal True runs."""
    runs, i, m = [], 0, mask.size
    while i < m:
        if mask[i]:
            j = i
            while j + 1 < m and mask[j + 1]:
                j += 1
            runs.append((i, j))
            i = j + 1
        else:
            i += 1
    return runs


def _trapz(y, x):
    return float(np.sum(0.5 * (y[1:] + y[:-1]) * np.diff(x))) if x.size > 1 else 0.0


def detect_necks(profile: RadialProfile, eps: float = 0.1) -> NeckReport:
    """Find radial intervals that look like long round cylinders.

    A neck is a maximal run of grid points with u < eps whose scale-invariant
    length int u^{-1/2} dr / r is at least 1/eps. Everything else is reported
    as cap region.
    """
    if not 0 < eps < 0.5:
        raise ValueError("eps must lie in (0, 0.5)")
    _require_positive(profile)
    r, u = profile.r, profile.u
    density = 1.0 / np.sqrt(u)
    necks, lengths = [], []
    in_neck = np.zeros(r.size, dtype=bool)
    for i, j in _runs(u < eps):
        length = _trapz(density[i:j + 1] / r[i:j + 1], r[i:j + 1])
        if length >= 1.0 / eps:
            necks.append((float(r[i]), float(r[j])))
            lengths.append(length)
            in_neck[i:j + 1] = True
    cap, diam = [], 0.0
    for i, j in _runs(~in_neck):
        # include the connecting cell on each side so the cap is closed up
        lo, hi = max(i - 1, 0), min(j + 1, r.size - 1)
        cap.append((float(r[lo]), float(r[hi])))
        diam += _trapz(density[lo:hi + 1], r[lo:hi + 1])
    return NeckReport(eps, necks, lengths, cap, diam)
