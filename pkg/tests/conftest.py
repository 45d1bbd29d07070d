import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("ci", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))


@pytest.fixture
def rng():
    return np.random.default_rng(42)


_CRITERIA = {}


@pytest.fixture
def criterion(capsys):
    """Record and print one PASS/FAIL line for an acceptance criterion."""
    def record(num, ok, detail):
        line = f"criterion {num}: {'PASS' if ok else 'FAIL'}  {detail}"
        _CRITERIA[str(num)] = line
        with capsys.disabled():
            print("\n" + line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_CRITERIA, key=lambda s: (int(s.rstrip("ab")), s)):
            terminalreporter.write_line(_CRITERIA[k])
