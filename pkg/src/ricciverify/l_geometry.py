"""Reduced distance and reduced volume on closed-form backward Ricci flows.

Three model flows are supported, all in backward time tau >= 0:

* ``flat``: Euclidean space, R = 0.
* ``shrinking_sphere``: g(tau) = rho^2(tau) g_{S^n}, rho^2 = 2(n-1) tau + rho0^2.
* ``shrinking_cylinder``: g(tau) = rho^2(tau) g_{S^(n-1)} + dz^2,
  rho^2 = 2(n-2) tau + rho0^2.

Paths are written in sigma = sqrt(s - tau0), in which

    L(gamma) = int_0^S (2 sigma^2 R + |gamma'(sigma)|^2 / 2) d sigma,   S = sqrt(tau - tau0),

and l = L / (2 S). Because every model is homogeneous, the reduced problem
uses one chart coordinate per "factor": the Euclidean coordinates for the
flat model, the angle along a great circle for the sphere, and (angle, axial
coordinate) for the cylinder. Symmetrising any path onto the great circle
(and the axis) through its endpoints can only shorten it, since R is
spatially constant on these models.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad
from scipy.linalg import solve_banded
from scipy.optimize import minimize
from scipy.special import gammaincc, gammainccinv

from . import io
from .shrinker_density import sphere_area

KINDS = ("flat", "shrinking_sphere", "shrinking_cylinder")

_GL_X, _GL_W = np.polynomial.legendre.leggauss(4)


class PathError(ValueError):
    """Raised for paths that leave the chart or have invalid sigma nodes."""


@dataclass(frozen=True)
class ModelFlow:
    """A closed-form backward Ricci flow with spatially constant curvature.

    ``rho0`` is the radius of the round factor at tau = 0; it must be
    positive so that the flow is smooth at the base time.
    """

    kind: str
    n: int
    rho0: float = 0.1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model {self.kind!r}; expected one of {KINDS}")
        if int(self.n) != self.n or self.n < (3 if self.kind == "shrinking_cylinder" else 2):
            raise ValueError(f"dimension {self.n!r} too small for the {self.kind} model")
        if self.kind != "flat" and not self.rho0 > 0:
            raise ValueError("rho0 must be positive")

    @property
    def slope(self) -> float:
        """d rho^2 / d tau."""
        return {"flat": 0.0, "shrinking_sphere": 2.0 * (self.n - 1),
                "shrinking_cylinder": 2.0 * (self.n - 2)}[self.kind]

    @property
    def _curv_numerator(self) -> float:
        # R = numerator / rho^2
        return {"flat": 0.0, "shrinking_sphere": self.n * (self.n - 1.0),
                "shrinking_cylinder": (self.n - 1.0) * (self.n - 2.0)}[self.kind]

    @property
    def chart_dim(self) -> int:
        return {"flat": self.n, "shrinking_sphere": 1, "shrinking_cylinder": 2}[self.kind]

    @property
    def round_dim(self) -> int:
        """Dimension of the round factor (0 for the flat model)."""
        return {"flat": 0, "shrinking_sphere": self.n, "shrinking_cylinder": self.n - 1}[self.kind]

    def rho2(self, tau):
        tau = np.asarray(tau, dtype=float)
        if np.any(tau < 0):
            raise ValueError("backward time must be >= 0")
        return self.slope * tau + self.rho0**2

    def scalar_curvature(self, x, tau):
        """R(x, tau); the same at every point of these models."""
        tau = np.asarray(tau, dtype=float)
        if self.kind == "flat":
            return np.zeros_like(tau)
        return self._curv_numerator / self.rho2(tau)

    def metric_weights(self, tau) -> np.ndarray:
        """Diagonal of g(tau) in chart coordinates, shape (..., chart_dim)."""
        tau = np.asarray(tau, dtype=float)
        if self.kind == "flat":
            return np.ones(tau.shape + (self.n,))
        if self.kind == "shrinking_sphere":
            return self.rho2(tau)[..., None]
        return np.stack([self.rho2(tau), np.ones_like(tau)], axis=-1)

    def check_chart(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if x.shape[-1] != self.chart_dim:
            raise PathError(f"{self.kind} chart points have {self.chart_dim} coordinates")
        if self.kind != "flat" and np.any(np.abs(x[..., 0]) > math.pi + 1e-12):
            raise PathError("angular coordinate left the chart [-pi, pi]")
        return x

    def distance(self, x1, x2, tau) -> np.ndarray:
        """Riemannian distance of g(tau) between chart points (the angle gap is
        taken as a great-circle arc, i.e. at most pi)."""
        d = np.abs(np.asarray(x2, dtype=float) - np.asarray(x1, dtype=float))
        if self.kind != "flat":
            d[..., 0] = np.minimum(d[..., 0], 2 * math.pi - d[..., 0])
        return np.sqrt(np.sum(self.metric_weights(tau) * d**2, axis=-1))

    # closed-form integrals in the sigma variable ---------------------------

    def curvature_integral(self, tau0: float, tau: float) -> float:
        """int_0^S 2 sigma^2 R(tau0 + sigma^2) d sigma in closed form."""
        S = math.sqrt(tau - tau0)
        if self.kind == "flat":
            return 0.0
        a, b = self.slope, self.slope * tau0 + self.rho0**2
        return 2 * self._curv_numerator / a * (S - math.sqrt(b / a) * math.atan(S * math.sqrt(a / b)))

    def inverse_weight_integral(self, tau0: float, tau: float) -> np.ndarray:
        """int_0^S d sigma / w_d(tau0 + sigma^2) for each chart coordinate d."""
        S = math.sqrt(tau - tau0)
        flat_part = S
        if self.kind == "flat":
            return np.full(self.n, flat_part)
        a, b = self.slope, self.slope * tau0 + self.rho0**2
        ang = math.atan(S * math.sqrt(a / b)) / math.sqrt(a * b)
        return np.array([ang]) if self.kind == "shrinking_sphere" else np.array([ang, flat_part])

    def record(self) -> dict:
        return {"kind": self.kind, "n": self.n, "rho0": self.rho0}


def closed_form_l(flow: ModelFlow, x0, x, tau: float, tau0: float = 0.0) -> float:
    """Reduced distance from the explicit minimiser (constant momentum w_d x_d')."""
    _check_times(tau0, tau)
    x0, x = flow.check_chart(x0), flow.check_chart(x)
    dx = x - x0
    S = math.sqrt(tau - tau0)
    kinetic = 0.5 * float(np.sum(dx**2 / flow.inverse_weight_integral(tau0, tau)))
    return (flow.curvature_integral(tau0, tau) + kinetic) / (2 * S)


def _check_times(tau0, tau):
    if tau0 < 0:
        raise ValueError("base time must be >= 0")
    if not tau > tau0:
        raise ValueError("need tau > tau0")


@dataclass
class SpaceTimePath:
    """Piecewise-linear path in the chart, parametrised by sigma = sqrt(s - tau0).

    ``nodes`` has shape (len(sigma), chart_dim) and includes both endpoints.
    """

    tau0: float
    tau: float
    sigma: np.ndarray
    nodes: np.ndarray

    def __post_init__(self):
        _check_times(self.tau0, self.tau)
        self.sigma = np.asarray(self.sigma, dtype=float)
        self.nodes = np.atleast_2d(np.asarray(self.nodes, dtype=float))
        if self.sigma.ndim != 1 or self.sigma.size < 2:
            raise PathError("need at least two sigma nodes")
        if np.any(np.diff(self.sigma) <= 0):
            raise PathError("sigma nodes must be strictly increasing")
        S = math.sqrt(self.tau - self.tau0)
        if abs(self.sigma[0]) > 1e-14 or abs(self.sigma[-1] - S) > 1e-12 * max(S, 1.0):
            raise PathError("sigma nodes must run from 0 to sqrt(tau - tau0)")
        if self.nodes.shape[0] != self.sigma.size:
            raise PathError("one position per sigma node is required")

    @property
    def x0(self) -> np.ndarray:
        return self.nodes[0]

    @property
    def x(self) -> np.ndarray:
        return self.nodes[-1]

    @classmethod
    def straight(cls, x0, x, tau: float, tau0: float = 0.0, segments: int = 16,
                 grading: float = 2.0) -> "SpaceTimePath":
        """Straight chart line with nodes sigma_i = S (i/m)^grading."""
        if segments < 1:
            raise PathError("need at least one segment")
        _check_times(tau0, tau)
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        x = np.atleast_1d(np.asarray(x, dtype=float))
        w = np.linspace(0.0, 1.0, segments + 1)
        sigma = math.sqrt(tau - tau0) * w**grading
        return cls(tau0, tau, sigma, x0[None, :] + w[:, None] * (x - x0)[None, :])

    def refined(self) -> "SpaceTimePath":
        """Insert the midpoint of every segment; the old path is still representable."""
        mid_s = 0.5 * (self.sigma[1:] + self.sigma[:-1])
        mid_x = 0.5 * (self.nodes[1:] + self.nodes[:-1])
        sigma = np.empty(2 * self.sigma.size - 1)
        nodes = np.empty((sigma.size, self.nodes.shape[1]))
        sigma[::2], sigma[1::2] = self.sigma, mid_s
        nodes[::2], nodes[1::2] = self.nodes, mid_x
        return SpaceTimePath(self.tau0, self.tau, sigma, nodes)

    def with_interior(self, interior: np.ndarray) -> "SpaceTimePath":
        nodes = self.nodes.copy()
        nodes[1:-1] = np.reshape(interior, nodes[1:-1].shape)
        return SpaceTimePath(self.tau0, self.tau, self.sigma, nodes)

    def to_csv(self, path, **meta):
        header = ["sigma", "s"] + [f"x{d}" for d in range(self.nodes.shape[1])]
        rows = [[s, self.tau0 + s**2, *p] for s, p in zip(self.sigma, self.nodes)]
        return io.write_csv(path, header, rows, {"tau0": self.tau0, "tau": self.tau, **meta})


def _segment_weights(flow: ModelFlow, path: SpaceTimePath) -> np.ndarray:
    """c_{j,d} = int_segment w_d d sigma / (delta sigma_j)^2 (Gauss rule, exact for
    the quadratic-in-sigma weights of the models)."""
    a, b = path.sigma[:-1], path.sigma[1:]
    mid, half = 0.5 * (a + b), 0.5 * (b - a)
    s = mid[:, None] + half[:, None] * _GL_X[None, :]
    w = flow.metric_weights(path.tau0 + s**2)                # (m, q, d)
    integral = half[:, None] * np.einsum("q,mqd->md", _GL_W, w)
    return integral / (b - a)[:, None] ** 2


def _curvature_part(flow: ModelFlow, path: SpaceTimePath) -> float:
    """int 2 sigma^2 R(gamma(sigma), tau0 + sigma^2) d sigma by adaptive quadrature."""
    if flow.kind == "flat":
        return 0.0

    def integrand(s):
        x = np.array([np.interp(s, path.sigma, path.nodes[:, d]) for d in range(path.nodes.shape[1])])
        return 2 * s**2 * float(flow.scalar_curvature(x, path.tau0 + s**2))

    val, _ = quad(integrand, 0.0, float(path.sigma[-1]), points=path.sigma[1:-1][:50],
                  limit=400, epsabs=0.0, epsrel=1e-13)
    return val


def l_functional(flow: ModelFlow, path: SpaceTimePath) -> float:
    """l = L(path) / (2 sqrt(tau - tau0)) for a piecewise-linear path."""
    flow.check_chart(path.nodes)
    c = _segment_weights(flow, path)
    kinetic = 0.5 * float(np.sum(c * np.diff(path.nodes, axis=0) ** 2))
    return (_curvature_part(flow, path) + kinetic) / (2 * path.sigma[-1])


def _kinetic_and_grad(c, nodes, interior, scale):
    nodes = nodes.copy()
    nodes[1:-1] = interior.reshape(nodes[1:-1].shape)
    dx = np.diff(nodes, axis=0)
    f = 0.5 * np.sum(c * dx**2)
    flux = c * dx                                  # (m, d)
    g = flux[:-1] - flux[1:]                      # derivative wrt interior nodes
    return scale * f, scale * g.ravel()


@dataclass
class PathOptConfig:
    """Node optimisation settings.

    ``segments`` is the starting number of path segments, doubled ``levels``
    times. ``perturb`` adds seeded noise of that amplitude to the straight
    initial path (a sanity check that the optimiser, not the initial guess,
    produces the minimum).
    """

    segments: int = 16
    levels: int = 3
    grading: float = 2.0
    gtol: float = 1e-8
    maxiter: int = 20000
    perturb: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.segments < 1 or self.levels < 0:
            raise ValueError("segments must be >= 1 and levels >= 0")
        if not self.gtol > 0:
            raise ValueError("gtol must be positive")


@dataclass
class ReducedDistance:
    value: float
    history: list[float]           # best value at each refinement level
    segments: list[int]
    grad_norm: float               # first-variation norm at the final level
    converged: bool
    newton_polish: bool
    path: SpaceTimePath = field(repr=False)

    @property
    def monotone(self) -> bool:
        h = self.history
        return all(b <= a * (1 + 1e-12) + 1e-14 for a, b in zip(h, h[1:]))


def _optimise(flow, path, cfg):
    """Minimise the kinetic part over the interior nodes (the curvature part is
    path independent on these models). L-BFGS first; when the first-variation
    norm is still above tolerance, polish with Newton steps on the exact
    block-tridiagonal Hessian (the kinetic energy is quadratic in the nodes)."""
    c = _segment_weights(flow, path)
    scale = 1.0 / (2 * path.sigma[-1])
    fun = lambda z: _kinetic_and_grad(c, path.nodes, z, scale)
    z0 = path.nodes[1:-1].ravel()
    if z0.size == 0:
        return path, 0.0, True, False
    res = minimize(fun, z0, jac=True, method="L-BFGS-B",
                   options={"gtol": cfg.gtol * 1e-2, "ftol": 1e-15, "maxiter": cfg.maxiter,
                            "maxcor": 30})
    z = res.x
    gnorm = float(np.max(np.abs(fun(z)[1])))
    polished = False
    if gnorm > cfg.gtol:
        polished = True
        # the Hessian decouples across coordinates: tridiagonal in the nodes
        for _ in range(3):
            g = fun(z)[1].reshape(-1, c.shape[1])
            step = np.empty_like(g)
            for d in range(c.shape[1]):
                cd = scale * c[:, d]
                ab = np.zeros((3, g.shape[0]))
                ab[1] = cd[:-1] + cd[1:]
                ab[0, 1:] = -cd[1:-1]
                ab[2, :-1] = -cd[1:-1]
                step[:, d] = solve_banded((1, 1), ab, g[:, d])
            z = z - step.ravel()
            gnorm = float(np.max(np.abs(fun(z)[1])))
            if gnorm <= cfg.gtol:
                break
    return path.with_interior(z), gnorm, gnorm <= cfg.gtol, polished


def reduced_distance(flow: ModelFlow, x0, x, tau: float, tau0: float = 0.0,
                     config: PathOptConfig | None = None) -> ReducedDistance:
    """Minimum of ``l_functional`` over piecewise-linear paths, refined by
    repeated midpoint insertion (so the value is non-increasing in the level).

    Non-convergence is reported through ``converged`` and ``grad_norm``
    together with the best value found.
    """
    cfg = config or PathOptConfig()
    x0, x = flow.check_chart(x0), flow.check_chart(x)
    path = SpaceTimePath.straight(x0, x, tau, tau0, cfg.segments, cfg.grading)
    if cfg.perturb:
        rng = np.random.default_rng(cfg.seed)
        noise = cfg.perturb * rng.standard_normal(path.nodes[1:-1].shape)
        path = path.with_interior(path.nodes[1:-1] + noise)
    history, segs = [], []
    converged, polished, gnorm = True, False, 0.0
    for level in range(cfg.levels + 1):
        if level:
            path = path.refined()
        path, gnorm, ok, pol = _optimise(flow, path, cfg)
        converged, polished = ok, polished or pol
        history.append(l_functional(flow, path))
        segs.append(path.sigma.size - 1)
    return ReducedDistance(history[-1], history, segs, gnorm, converged, polished, path)


# -- reduced volume -------------------------------------------------------------

def _l_values(flow, x0, pts, tau, tau0, distance, cfg):
    if distance == "closed":
        return np.array([closed_form_l(flow, x0, p, tau, tau0) for p in pts])
    if distance == "numeric":
        return np.array([reduced_distance(flow, x0, p, tau, tau0, cfg).value for p in pts])
    raise ValueError(f"unknown distance route {distance!r}")


@dataclass
class ReducedVolume:
    tau: float
    value: float
    tail: float                     # bound on the discarded Euclidean tail (relative)
    truncation: float | None        # Euclidean truncation radius, if any
    distance: str


def _euclidean_factor(flow, tau, tau0, dim, points, distance, cfg, tail_tol):
    """(4 pi T)^(-dim/2) int_{R^dim} e^{-(l - l(x0))} dx for the Euclidean factor,
    truncated where the Gaussian mass outside the ball of radius d drops below
    tail_tol (the Euclidean factor has exactly l - l(x0) = d^2 / (4T))."""
    T = tau - tau0
    d_max = math.sqrt(4 * T * float(gammainccinv(0.5 * dim, tail_tol)))
    x, w = np.polynomial.legendre.leggauss(points)
    r = 0.5 * d_max * (x + 1)
    w = 0.5 * d_max * w
    base = np.zeros(flow.chart_dim)
    pts = np.zeros((points, flow.chart_dim))
    pts[:, -1 if flow.kind == "shrinking_cylinder" else 0] = r
    l0 = _l_values(flow, base, [base], tau, tau0, distance, cfg)[0]
    excess = _l_values(flow, base, pts, tau, tau0, distance, cfg) - l0
    if dim == 1:
        integral = 2 * np.sum(w * np.exp(-excess))
    else:
        integral = sphere_area(dim - 1) * np.sum(w * np.exp(-excess) * r ** (dim - 1))
    # the Gaussian mass beyond d_max, as a fraction of the whole
    tail = float(gammaincc(0.5 * dim, d_max**2 / (4 * T)))
    return integral / (4 * math.pi * T) ** (dim / 2), tail, d_max


def reduced_volume(flow: ModelFlow, tau: float, tau0: float = 0.0, points: int = 200,
                   distance: str = "closed", config: PathOptConfig | None = None,
                   tail_tol: float = 1e-10) -> ReducedVolume:
    """(4 pi (tau - tau0))^(-n/2) int e^{-l(., tau)} d mu_{g(tau)}.

    ``distance`` selects the reduced distance route: "closed" (explicit
    minimiser) or "numeric" (path optimisation at every quadrature node).
    The cylinder integral factors into the round part times the axial
    Gaussian because l splits as a sum over the two factors.
    """
    _check_times(tau0, tau)
    T = tau - tau0
    cfg = config or PathOptConfig(levels=1)
    if flow.kind == "flat":
        val, tail, d_max = _euclidean_factor(flow, tau, tau0, flow.n, points, distance, cfg, tail_tol)
        return ReducedVolume(tau, val, tail, d_max, distance)
    m = flow.round_dim
    x, w = np.polynomial.legendre.leggauss(points)
    theta = 0.5 * math.pi * (x + 1)
    w = 0.5 * math.pi * w
    pts = np.zeros((points, flow.chart_dim))
    pts[:, 0] = theta
    l = _l_values(flow, np.zeros(flow.chart_dim), pts, tau, tau0, distance, cfg)
    rho2 = float(flow.rho2(tau))
    round_int = sphere_area(m - 1) * rho2 ** (m / 2) * np.sum(w * np.exp(-l) * np.sin(theta) ** (m - 1))
    val = round_int / (4 * math.pi * T) ** (m / 2)
    tail, d_max = 0.0, None
    if flow.kind == "shrinking_cylinder":
        axial, tail, d_max = _euclidean_factor(flow, tau, tau0, 1, points, distance, cfg, tail_tol)
        val *= axial
    return ReducedVolume(tau, float(val), tail, d_max, distance)


# -- bound checks --------------------------------------------------------------

@dataclass
class LBoundsRow:
    tau: float
    min_l: float
    min_l_ok: bool
    c: float          # lower quadratic-growth constant fitted on the sample
    C: float          # upper quadratic-growth constant fitted on the sample
    gradient_C: float  # max of tau (|grad l|^2 + R) / l over the sample
    volume: float


@dataclass
class LBoundsReport:
    flow: dict
    rows: list[LBoundsRow]
    tol: float
    passed: bool
    volume_monotone: bool
    note: str = ("c, C and gradient_C are empirical constants for this model and "
                 "sample, not universal dimension constants")

    def to_dict(self) -> dict:
        return {"flow": self.flow, "tol": self.tol, "passed": self.passed,
                "volume_monotone": self.volume_monotone, "note": self.note,
                "rows": [r.__dict__ for r in self.rows]}


def sample_points(flow: ModelFlow, tau: float, tau0: float = 0.0, samples: int = 25) -> np.ndarray:
    """Chart sample for the bound checks: a radial ray (flat), meridian (sphere)
    or an (angle, axial) grid (cylinder), reaching scaled distance about 3."""
    reach = 3.0 * math.sqrt(tau - tau0)
    if flow.kind == "flat":
        pts = np.zeros((samples, flow.n))
        pts[:, 0] = np.linspace(0, reach, samples)
        return pts
    th = np.linspace(0, math.pi, samples)
    if flow.kind == "shrinking_sphere":
        return th[:, None]
    z = np.linspace(0, reach, samples)
    T, Z = np.meshgrid(th, z, indexing="ij")
    return np.column_stack([T.ravel(), Z.ravel()])


def _fit_sandwich(flow, pts, l, tau):
    d2 = flow.distance(pts[:, None, :], pts[None, :, :], tau) ** 2 / tau
    diff = l[None, :] - l[:, None]                 # l(x2) - l(x1)
    C = max(float(np.max(diff / (1 + d2))), 0.0)
    mask = d2 > 1e-12
    c = float(np.min((l[:, None] + l[None, :] + C)[mask] / d2[mask])) if mask.any() else math.inf
    return c, C


def _gradient_constant(flow, pts, l, tau, tau0, distance, cfg, h=1e-5):
    ratios = []
    R = float(flow.scalar_curvature(None, tau))
    wts = flow.metric_weights(tau)
    for p, lp in zip(pts, l):
        if lp <= 1e-8:
            continue
        g2 = 0.0
        for d in range(flow.chart_dim):
            e = np.zeros(flow.chart_dim)
            e[d] = h
            hi, lo = p + e, p - e
            if flow.kind != "flat" and d == 0 and (hi[0] > math.pi or lo[0] < -math.pi):
                continue
            lh, ll = _l_values(flow, np.zeros(flow.chart_dim), [hi, lo], tau, tau0, distance, cfg)
            g2 += ((lh - ll) / (2 * h)) ** 2 / wts[d]
        ratios.append(tau * (g2 + R) / lp)
    return max(ratios) if ratios else 0.0


def check_l_bounds(flow: ModelFlow, taus, tau0: float = 0.0, samples: int = 25, tol: float = 1e-6,
                   distance: str = "closed", config: PathOptConfig | None = None,
                   volume_points: int = 200) -> LBoundsReport:
    """Check inf l <= n/2, fit the two-sided quadratic-growth constants and the
    gradient constant on a sample, and test monotonicity of the reduced volume."""
    cfg = config or PathOptConfig(levels=1)
    rows = []
    for tau in sorted(float(t) for t in taus):
        pts = sample_points(flow, tau, tau0, samples)
        l = _l_values(flow, np.zeros(flow.chart_dim), pts, tau, tau0, distance, cfg)
        c, C = _fit_sandwich(flow, pts, l, tau)
        gC = _gradient_constant(flow, pts, l, tau, tau0, distance, cfg)
        vol = reduced_volume(flow, tau, tau0, volume_points, distance, cfg).value
        rows.append(LBoundsRow(tau, float(l.min()), bool(l.min() <= flow.n / 2 + tol), c, C, gC, vol))
    vols = [r.volume for r in rows]
    mono = all(b <= a + tol for a, b in zip(vols, vols[1:]))
    in_range = all(0 < v <= 1 + 1e-8 for v in vols)
    passed = all(r.min_l_ok for r in rows) and mono and in_range
    return LBoundsReport(flow.record(), rows, tol, passed, mono)
