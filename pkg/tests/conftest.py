import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from lcm4rec.data import UtilityParams

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_params(rng, n_users=3, n_items=5, m=2, scale=0.7):
    return UtilityParams(
        rng.normal(0, scale, (n_users, m)),
        rng.normal(0, scale, (n_items, m)),
        rng.uniform(0, 1, n_items),
    )


@pytest.fixture
def small_params(rng):
    return random_params(rng)


# -- acceptance summary -------------------------------------------------------------

ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, title: str, ok: bool, detail: str, seconds: float) -> None:
    ACCEPTANCE_LINES[number] = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title} ({detail}; {seconds:.1f} s)"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
