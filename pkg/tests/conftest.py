import numpy as np
import pytest

from vibpol.model import ModelParams


@pytest.fixture
def params():
    """Room-temperature coupled chain at resonance, eta = 0.1."""
    return ModelParams.from_physical(eta=0.1, n_sites=16)


@pytest.fixture
def matter():
    return ModelParams.from_physical().isolated_matter()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = {}


def record_criterion(number, passed, detail):
    """Store and print one acceptance line; the summary repeats them at the end."""
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} | {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
