import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("tide", max_examples=40, deadline=None)
settings.load_profile("tide")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def report():
    """Record the pass/fail line for one acceptance criterion."""

    def put(n: int, ok: bool, detail: str, seconds: float | None = None):
        took = f" [{seconds:.1f}s]" if seconds is not None else ""
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}{took}"
        ACCEPTANCE_LINES[n] = line
        print(line)
        return ok

    return put


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
