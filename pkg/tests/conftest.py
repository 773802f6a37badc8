import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from zest.model_store import LogLinearModel, generate_synthetic

settings.register_profile(
    "zest", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("zest")


@pytest.fixture
def small_snapshot():
    return generate_synthetic(50, 8, 5, scale=0.7, seed=3)


@pytest.fixture
def small_model(small_snapshot) -> LogLinearModel:
    return small_snapshot.model


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion; repeated in the summary."""

    def record(number: int, name: str, ok: bool, detail: str) -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {name} ({detail})"
        print(line)
        ACCEPTANCE_LINES.append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
