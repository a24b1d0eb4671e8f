import pytest

_LINES = []


@pytest.fixture
def criterion():
    """``criterion(n, title, ok, detail)`` prints and keeps one pass/fail line."""

    def record(n, title, ok, detail):
        line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        _LINES.append((n, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_LINES):
            terminalreporter.write_line(line)
