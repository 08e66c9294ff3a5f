import numpy as np
import pytest

from udm.numerics import RngStream
from udm.schedule import build_linear_schedule


@pytest.fixture(scope="session")
def schedule():
    return build_linear_schedule()


@pytest.fixture
def stream():
    return RngStream(1234, 0)


def rel(a, b):
    return float(np.linalg.norm(np.ravel(a) - np.ravel(b)) / np.linalg.norm(np.ravel(b)))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
