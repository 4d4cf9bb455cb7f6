import numpy as np
import pytest

from quadfuse import kernels

# verdict lines collected by test_acceptance, echoed after the run
acceptance_verdicts: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if acceptance_verdicts:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_verdicts:
            terminalreporter.write_line(line)


@pytest.fixture(params=["numba", "numpy"])
def kernel_path(request, monkeypatch):
    """Run the test once per kernel implementation path."""
    if request.param == "numba" and not kernels.HAVE_NUMBA:
        pytest.skip("numba unavailable")
    monkeypatch.setenv("QUADFUSE_NUMBA", "1" if request.param == "numba" else "0")
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
