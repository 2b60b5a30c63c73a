import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

GOLDEN_DIR = os.path.join(os.path.dirname(__file__), "golden")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def golden_path(name: str) -> str:
    return os.path.join(GOLDEN_DIR, name)


def pytest_terminal_summary(terminalreporter):
    import sys
    module = sys.modules.get("test_acceptance")
    if module is not None and module.LINES:
        terminalreporter.section("acceptance criteria")
        for line in module.LINES:
            terminalreporter.write_line(line)
