import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from seam import tensor as T  # noqa: E402


@pytest.fixture
def f64():
    with T.test_mode():
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
