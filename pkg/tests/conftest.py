import numpy as np
import pytest
from hypothesis import settings

from trignet.plant import NonlinearPlant, generate_random_system
from trignet.trigger import synthesize

settings.register_profile("trignet", deadline=None, print_blob=True)
settings.load_profile("trignet")

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for the acceptance summary and return the flag."""
    def record(number, ok, title, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} {title}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


@pytest.fixture(scope="session")
def nonlinear_plant():
    return NonlinearPlant(64.0)


@pytest.fixture(scope="session")
def nonlinear_design(nonlinear_plant):
    return synthesize(nonlinear_plant, practical_c=[0.01, 0.01])


@pytest.fixture(scope="session")
def seed7_plant():
    return generate_random_system(3, 3, 7)


@pytest.fixture(scope="session")
def seed7_design(seed7_plant):
    return synthesize(seed7_plant, practical_c=1e-6)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
