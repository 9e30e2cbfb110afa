import numpy as np
import pytest

from s6tal import tensor as T


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with T.precision(np.float64):
        yield


def t64(a, grad=False):
    return T.Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


# acceptance criteria report: (status, name, detail) tuples appended by test_acceptance
ACCEPTANCE: list[tuple[str, str, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for status, name, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{status}  {name}: {detail}")
