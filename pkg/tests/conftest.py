import pytest

ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """Print and record one PASS/FAIL line for an acceptance criterion, then assert it."""
    def report(name: str, passed: bool, detail: str = "") -> None:
        line = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"
        print("\n" + line)
        ACCEPTANCE_LINES.append(line)
        assert passed, line
    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
