import sys
import numpy as np
import pytest

from cipherlayer.he import CkksBackend, ClearBackend, HeParams

# Small ring used by most CKKS tests: 32 slots, enough levels for two-level kernels.
SMALL = HeParams(ring_degree=64, max_level=6, refresh_cost=2)
# Deep ring for approximation and block tests (many levels, tiny ring).
DEEP = HeParams(ring_degree=32, max_level=24, refresh_cost=2)


@pytest.fixture(scope="session")
def small_ckks():
    return CkksBackend(SMALL, seed=11)


@pytest.fixture(scope="session")
def deep_ckks():
    return CkksBackend(DEEP, seed=12)


@pytest.fixture
def clear():
    return ClearBackend(HeParams(ring_degree=64, max_level=30, refresh_cost=2), seed=3)


@pytest.fixture(params=["clear", "ckks"])
def any_backend(request, small_ckks):
    if request.param == "clear":
        return ClearBackend(SMALL, seed=11)
    small_ckks.counters.reset()
    return small_ckks


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
