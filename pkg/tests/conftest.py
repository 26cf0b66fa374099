from __future__ import annotations

import pytest
from hypothesis import HealthCheck, settings

from sspabs.abstraction import BuildParams, build_hierarchy
from sspabs.domains import make_chain, make_gridworld

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def chain4():
    """Deterministic chain 0 -> 1 -> 2 -> 3 with goal 3."""
    return make_chain(4).with_goal(3)


@pytest.fixture(scope="session")
def grid10():
    return make_gridworld(10, 10, 0.7)


@pytest.fixture(scope="session")
def grid10_h1(grid10):
    return build_hierarchy(grid10, 1, BuildParams(k=2, eps=4.0))


@pytest.fixture(scope="session")
def grid10_h2(grid10):
    return build_hierarchy(grid10, 2, BuildParams(k=2, eps=4.0))


@pytest.fixture(scope="session")
def grid50():
    return make_gridworld(50, 50, 0.7)


@pytest.fixture(scope="session")
def grid50_h1(grid50):
    return build_hierarchy(grid50, 1, BuildParams(k=2, p=4, eps=4.0))
