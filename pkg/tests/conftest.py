import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from forge.body import make_toy_body

settings.register_profile("forge", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("forge")

# acceptance-criterion outcomes, printed once at the end of the session
CRITERIA: dict[str, tuple[str, str]] = {}


def record_criterion(key: str, passed: bool | None, detail: str) -> None:
    status = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
    CRITERIA[key] = (status, detail)
    print(f"[criterion {key}] {status}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(CRITERIA, key=lambda k: int(k)):
        status, detail = CRITERIA[key]
        terminalreporter.write_line(f"criterion {key}: {status} - {detail}")


@pytest.fixture(scope="session")
def toy_body():
    return make_toy_body()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
