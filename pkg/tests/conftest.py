import pytest

ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def record():
    """Store one summary line per acceptance criterion."""
    def _record(n: int, ok: bool, detail: str) -> None:
        ACCEPTANCE[n] = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
