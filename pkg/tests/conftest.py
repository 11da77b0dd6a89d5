import numpy as np
import pytest
from hypothesis import settings

from findnet import ctsim

settings.register_profile("default", max_examples=25, deadline=None)
settings.load_profile("default")


def small_config(size=32, count=1, radius=(1.0, 2.5), beta=0.3, noise=1.0):
    n = int(np.ceil(size * 1.5))
    return ctsim.SampleConfig(
        phantom=ctsim.PhantomConfig(size, size, 4, ctsim.MetalConfig(count, radius, 2.5)),
        geometry=ctsim.Geometry(n, n),
        corruption=ctsim.Corruption(beta, noise))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def sample32():
    return ctsim.make_sample(7, small_config())


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, with the measured numbers."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            if "test_acceptance.py" not in getattr(rep, "nodeid", "") or rep.when != "call":
                continue
            detail = "; ".join(f"{k}={v}" for k, v in rep.user_properties)
            name = rep.nodeid.split("::")[-1]
            lines.append(f"{'PASS' if outcome == 'passed' else 'FAIL'}  {name}  {detail}")
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: s.split()[1]):
            terminalreporter.write_line(line)
