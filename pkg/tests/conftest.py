import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large])
settings.load_profile("default")


@pytest.fixture
def gen():
    return np.random.default_rng(1234)


# one (criterion, passed, seconds, detail) entry per acceptance check, filled by test_acceptance
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, seconds, detail in sorted(ACCEPTANCE, key=lambda r: int(r[0][1:])):
        terminalreporter.write_line(f"{name:4s} {'PASS' if passed else 'FAIL'}  {seconds:8.2f}s  {detail}")
