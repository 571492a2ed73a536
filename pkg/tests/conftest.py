import os
import sys

import pytest
from threadpoolctl import threadpool_limits

sys.path.insert(0, os.path.dirname(__file__))


@pytest.fixture(autouse=True, scope="session")
def _single_threaded_blas():
    with threadpool_limits(limits=int(os.environ.get("XMGC_THREADS", "1"))):
        yield


@pytest.fixture(autouse=True)
def _fresh_tape():
    from xmgc import tensor_core

    tensor_core.get_tape().clear()
    yield
    tensor_core.get_tape().clear()


# one line per acceptance criterion, repeated at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
