import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from spvb.evaluation import SimSpec, simulate

settings.register_profile(
    "spvb", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("spvb")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def sim100():
    return simulate(SimSpec(n=100, seed=11))


@pytest.fixture(scope="session")
def sim500():
    return simulate(SimSpec(n=500, seed=5))


def pytest_terminal_summary(terminalreporter):
    lines = [
        value
        for key in ("passed", "failed")
        for rep in terminalreporter.stats.get(key, [])
        if rep.when == "call"
        for name, value in rep.user_properties
        if name == "acceptance"
    ]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
