"""Gaussian densities of Ricci shrinkers built from round spheres and
Euclidean factors.

The shrinker normalization is Ric + Hess f = g/2 with |grad f|^2 + R = f.
On a round n-sphere this forces Ric = g/2, so the radius is sqrt(2(n-1)),
and f = R = n/2 is constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

LIMIT = math.sqrt(2.0 / math.e)


def _check_dim(n: int) -> None:
    if int(n) != n or n < 2:
        raise ValueError(f"sphere dimension must be an integer >= 2, got {n!r}")


def stirling_theta(m: float) -> float:
    """Remainder theta(m) in Gamma(m+1) = sqrt(2 pi) m^(m+1/2) e^(-m) e^theta(m)."""
    return float(gammaln(m + 1.0) - (0.5 * math.log(2 * math.pi) + (m + 0.5) * math.log(m) - m))


def density_sphere(n: int) -> float:
    """Closed-form density of the round n-sphere shrinker.

    Evaluated in log space with m = (n-1)/2 so that large n does not overflow.
    """
    _check_dim(n)
    m = 0.5 * (n - 1)
    log_v = (0.5 * math.log(2 * math.pi) + (m + 0.5) * math.log(m) - m
             - gammaln(m + 1.0) + 0.5 * (math.log(2.0) - 1.0))
    return math.exp(log_v)


def sphere_area(n: int, radius: float = 1.0) -> float:
    """Area of the round n-sphere of the given radius."""
    log_a = (math.log(2.0) + 0.5 * (n + 1) * math.log(math.pi) - gammaln(0.5 * (n + 1))
             + n * math.log(radius))
    return math.exp(log_a)


def density_sphere_integral(n: int) -> float:
    """Density from its definition, (4 pi)^(-n/2) * int e^(-f) dmu with f = n/2.

    Independent of :func:`density_sphere`; goes through the surface area of
    the sphere of radius sqrt(2(n-1)).
    """
    _check_dim(n)
    log_v = (-0.5 * n * math.log(4 * math.pi) - 0.5 * n + math.log(2.0)
             + 0.5 * (n + 1) * math.log(math.pi) - gammaln(0.5 * (n + 1))
             + 0.5 * n * math.log(2.0 * (n - 1)))
    return math.exp(log_v)


@dataclass(frozen=True)
class Factor:
    kind: str  # "sphere" or "euclidean"
    dim: int

    def __post_init__(self):
        if self.kind not in ("sphere", "euclidean"):
            raise ValueError(f"unknown factor kind {self.kind!r}")
        if self.kind == "sphere" and self.dim < 2:
            raise ValueError("sphere factors need dim >= 2")
        if self.kind == "euclidean" and self.dim < 1:
            raise ValueError("euclidean factors need dim >= 1")


@dataclass(frozen=True)
class ShrinkerSpec:
    """Product of round spheres and Euclidean factors, optionally divided
    by a free isometric action of a finite group of the given order."""

    factors: tuple[Factor, ...] = field(default_factory=tuple)
    quotient_order: int = 1

    def __post_init__(self):
        if self.quotient_order < 1 or int(self.quotient_order) != self.quotient_order:
            raise ValueError("quotient_order must be a positive integer")
        if not self.factors:
            raise ValueError("a shrinker needs at least one factor")

    @property
    def dim(self) -> int:
        return sum(f.dim for f in self.factors)

    @classmethod
    def parse(cls, text: str) -> "ShrinkerSpec":
        """Parse strings like ``"S3xR1"``, ``"S^2 x S^2 / 2"`` or ``"R4"``."""
        body, _, order = text.partition("/")
        factors = []
        for token in body.split("x"):
            token = token.strip().replace("^", "")
            if not token or token[0] not in "SR":
                raise ValueError(f"cannot parse factor {token!r} in {text!r}")
            kind = "sphere" if token[0] == "S" else "euclidean"
            factors.append(Factor(kind, int(token[1:] or 1)))
        return cls(tuple(factors), int(order) if order else 1)

    def concat(self, other: "ShrinkerSpec") -> "ShrinkerSpec":
        return ShrinkerSpec(self.factors + other.factors, self.quotient_order * other.quotient_order)


def density_spec(spec: ShrinkerSpec) -> float:
    """Product of factor densities (Euclidean factors contribute 1) over |Gamma|."""
    value = 1.0
    for f in spec.factors:
        if f.kind == "sphere":
            value *= density_sphere(f.dim)
    return value / spec.quotient_order


def cylinder_density(n: int) -> float:
    """Density of S^(n-1) x R."""
    return density_spec(ShrinkerSpec((Factor("sphere", n - 1), Factor("euclidean", 1))))


@dataclass
class DensityScan:
    n: np.ndarray
    closed_form: np.ndarray
    integral_oracle: np.ndarray
    gap: np.ndarray  # V(S^n) - V(S^(n-1)); nan for n = 2
    checks: dict

    def rows(self):
        for row in zip(self.n, self.closed_form, self.integral_oracle, self.gap):
            yield row


def density_scan(n_max: int, rtol: float = 1e-12) -> DensityScan:
    """Tabulate sphere densities for n = 2..n_max and check the ordering claims."""
    if n_max < 3:
        raise ValueError("n_max must be >= 3")
    ns = np.arange(2, n_max + 1)
    closed = np.array([density_sphere(int(k)) for k in ns])
    oracle = np.array([density_sphere_integral(int(k)) for k in ns])
    gap = np.concatenate([[np.nan], np.diff(closed)])
    rel = np.abs(closed / oracle - 1.0)
    checks = {
        "two_route_max_rel_err": {"value": float(rel.max()), "pass": bool(rel.max() <= rtol)},
        "strictly_increasing": {"value": float(np.diff(closed).min()),
                                "pass": bool(np.all(np.diff(closed) > 0))},
        "below_limit": {"value": float((LIMIT - closed).min()), "pass": bool(np.all(closed < LIMIT))},
        # cylinder S^(n-1) x R against S^n, for n = 3..n_max
        "cylinder_below_sphere": {
            "value": float(np.nanmin(gap)),
            "pass": bool(all(cylinder_density(int(k)) < density_sphere(int(k)) for k in ns[1:])),
        },
        "gaps_positive": {"value": float(np.nanmin(gap)), "pass": bool(np.nanmin(gap) > 0)},
    }
    return DensityScan(ns, closed, oracle, gap, checks)
