import pytest

ACCEPTANCE_LINES = {}


@pytest.fixture
def report():
    """``report(n, ok, detail)`` records one acceptance line and prints it."""

    def _report(n, ok, detail):
        line = f"acceptance {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[n] = line
        print(line)
        return ok

    return _report


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
