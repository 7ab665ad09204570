import numpy as np
import pytest

# One entry per acceptance criterion check: (criterion, verdict, detail).
ACCEPTANCE_LINES: list[tuple[str, str, str]] = []


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def verdict():
    """Record and print one PASS/FAIL line, then assert on it."""
    def record(criterion: str, ok: bool, detail: str) -> None:
        line = (criterion, "PASS" if ok else "FAIL", detail)
        ACCEPTANCE_LINES.append(line)
        print(f"{line[1]}  {criterion}: {detail}")
        assert ok, f"{criterion}: {detail}"
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, status, detail in ACCEPTANCE_LINES:
        terminalreporter.write_line(f"{status}  {criterion}: {detail}")
