import numpy as np
import pytest

from fedseg import tensor as T
from fedseg.datastore import partition_clients


def pytest_configure(config):
    config._acceptance = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config._acceptance
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for number, line in sorted(lines):
        terminalreporter.write_line(line)


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for an acceptance criterion and print it."""

    def record(number: int, title: str, passed: bool, detail: str = "") -> bool:
        line = f"{'PASS' if passed else 'FAIL'}  criterion {number}: {title}" + (f"  [{detail}]" if detail else "")
        request.config._acceptance.append((number, line))
        print(line)
        return passed

    return record


@pytest.fixture(autouse=True)
def _float32_default():
    T.set_default_dtype(np.float32)
    yield
    T.set_default_dtype(np.float32)


@pytest.fixture(scope="session")
def tiny_clients():
    """Two small clients, 32x32 slices, two organs."""
    return partition_clients([5, 6], [3, 4], ["MR_T2", "CT"], n_slices=(6, 8), hw=32, n_organs=2)
