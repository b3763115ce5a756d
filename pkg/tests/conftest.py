import numpy as np
import pytest

from razer import _accel

ACCEPTANCE_LINES = []

BACKENDS = [pytest.param(False, id="numpy")]
if _accel._HAVE_NUMBA:
    BACKENDS.append(pytest.param(True, id="numba"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=BACKENDS)
def use_numba(request):
    return request.param


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line[1])
