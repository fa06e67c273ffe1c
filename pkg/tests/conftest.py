import numpy as np
import pytest

from sonet.data import load_mnist

ACCEPTANCE_RESULTS = []


@pytest.fixture(scope="session")
def mnist():
    return load_mnist()


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
