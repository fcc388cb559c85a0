import pytest

_LINES = []


@pytest.fixture
def criterion():
    """Record one acceptance line: criterion(k, passed, detail)."""

    def record(k, passed, detail):
        _LINES.append((k, f"criterion {k:>2}: {'PASS' if passed else 'FAIL'}  {detail}"))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_LINES, key=lambda x: x[0]):
            terminalreporter.write_line(line)
