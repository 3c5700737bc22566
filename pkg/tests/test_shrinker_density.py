import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ricciverify.shrinker_density import (
    LIMIT,
    Factor,
    ShrinkerSpec,
    cylinder_density,
    density_scan,
    density_spec,
    density_sphere,
    density_sphere_integral,
    sphere_area,
    stirling_theta,
)


def mp_density(n):
    """High-precision oracle straight from the definition with f = n/2 on the
    sphere of radius sqrt(2(n-1))."""
    mpmath.mp.dps = 40
    n = mpmath.mpf(n)
    area = 2 * mpmath.pi ** ((n + 1) / 2) / mpmath.gamma((n + 1) / 2) * (2 * (n - 1)) ** (n / 2)
    return float((4 * mpmath.pi) ** (-n / 2) * mpmath.e ** (-n / 2) * area)


@pytest.mark.parametrize("n, exact", [
    (2, 2 / math.e),
    (3, 2 * math.sqrt(math.pi) * math.exp(-1.5)),
])
def test_low_dimensional_values(n, exact):
    assert density_sphere(n) == pytest.approx(exact, rel=1e-14)
    assert density_sphere_integral(n) == pytest.approx(exact, rel=1e-14)


@pytest.mark.parametrize("n", [2, 3, 4, 7, 20, 50, 200])
def test_two_routes_agree_with_high_precision_oracle(n):
    ref = mp_density(n)
    assert density_sphere(n) == pytest.approx(ref, rel=1e-12)
    assert density_sphere_integral(n) == pytest.approx(ref, rel=1e-12)


def test_large_dimension_does_not_overflow():
    v = density_sphere(10_000)
    assert math.isfinite(v) and v < LIMIT


def test_limit_value():
    assert LIMIT == pytest.approx(math.sqrt(2 / math.e))
    assert density_sphere(100_000) == pytest.approx(LIMIT, rel=1e-5)


def test_scan_monotone_and_bounded():
    scan = density_scan(50)
    assert all(c["pass"] for c in scan.checks.values())
    assert np.all(np.diff(scan.closed_form) > 0)
    assert np.all(scan.closed_form < LIMIT)
    assert math.isnan(scan.gap[0])


def test_scan_rejects_small_range():
    with pytest.raises(ValueError):
        density_scan(2)


@pytest.mark.parametrize("m", [0.5, 1.0, 3.5, 10.0, 100.0])
def test_stirling_remainder_positive_and_small(m):
    theta = stirling_theta(m)
    # 1/(12m+1) < theta(m) < 1/(12m)
    assert 1 / (12 * m + 1) < theta < 1 / (12 * m)


def test_sphere_area_known_values():
    assert sphere_area(1) == pytest.approx(2 * math.pi)
    assert sphere_area(2, 2.0) == pytest.approx(16 * math.pi)
    assert sphere_area(3) == pytest.approx(2 * math.pi**2)


@pytest.mark.parametrize("n", [-1, 0, 1, 2.5])
def test_invalid_dimension(n):
    with pytest.raises(ValueError):
        density_sphere(n)


def test_spec_parse_and_products():
    spec = ShrinkerSpec.parse("S^3 x S^2 x R^2 / 4")
    assert spec.dim == 3 + 2 + 2
    assert density_spec(spec) == pytest.approx(density_sphere(3) * density_sphere(2) / 4)
    assert cylinder_density(4) == pytest.approx(density_sphere(3))


def test_cylinder_below_sphere():
    for n in range(3, 30):
        assert cylinder_density(n) < density_sphere(n)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(min_value=2, max_value=12), min_size=1, max_size=4),
       st.integers(min_value=0, max_value=3), st.integers(min_value=1, max_value=6))
def test_splitting_is_multiplicative(spheres, euclid, order):
    factors = tuple(Factor("sphere", d) for d in spheres)
    if euclid:
        factors += (Factor("euclidean", euclid),)
    spec = ShrinkerSpec(factors, order)
    expected = math.prod(density_sphere(d) for d in spheres) / order
    assert density_spec(spec) == pytest.approx(expected, rel=1e-13)
    # a quotient never increases the density; adding a line does not change it
    assert density_spec(spec) <= density_spec(ShrinkerSpec(factors, 1)) + 1e-15
    line = ShrinkerSpec((Factor("euclidean", 1),), 1)
    assert density_spec(spec.concat(line)) == pytest.approx(density_spec(spec), rel=1e-15)


@pytest.mark.parametrize("text", ["", "T3", "S2 x Q", "S1", "S3/0"])
def test_spec_parse_errors(text):
    with pytest.raises(ValueError):
        ShrinkerSpec.parse(text)
