from __future__ import annotations

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from tests.test_acceptance import RESULT_LINES

    if not RESULT_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(RESULT_LINES):
        terminalreporter.write_line(RESULT_LINES[cid])
