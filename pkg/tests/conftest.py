import numpy as np
import pytest
from hypothesis import HealthCheck, settings

import criteria

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if criteria.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in criteria.summary_lines():
            terminalreporter.write_line(line)
