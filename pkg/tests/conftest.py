import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gluefuse.dataset import Schema

settings.register_profile(
    "default", deadline=None, max_examples=50, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def small_schema():
    return Schema.from_records(
        [
            {"name": "A1", "levels": 2, "role": "A"},
            {"name": "B1", "levels": 2, "role": "B"},
            {"name": "C1", "levels": 3, "role": "Bprime"},
        ]
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def write(path, text):
    path.write_text(text)
    return path


ACCEPTANCE: dict[int, str] = {}


def record(criterion: int, ok: bool, detail: str) -> bool:
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[criterion] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
