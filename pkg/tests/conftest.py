"""Shared, session-cached numerical objects (solitons and zeta tables are
deterministic and comparatively expensive)."""

from functools import lru_cache

import pytest

from ricciverify.barrier import REFERENCE_THRESHOLDS, build_barrier, compute_zeta
from ricciverify.steady_soliton import solve_singular_soliton


@lru_cache(maxsize=None)
def soliton(n):
    return solve_singular_soliton(n)


@lru_cache(maxsize=None)
def zeta(n):
    return compute_zeta(n)


@lru_cache(maxsize=None)
def reference_barrier(n, multiple=2.0):
    A_min, factor = REFERENCE_THRESHOLDS[n]
    sol = soliton(n)
    return build_barrier(n, multiple * A_min, factor * sol.r_star, sol, zeta(n))


@pytest.fixture(scope="session")
def get_soliton():
    return soliton


@pytest.fixture(scope="session")
def get_zeta():
    return zeta


@pytest.fixture(scope="session")
def get_barrier():
    return reference_barrier
