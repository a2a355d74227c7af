import pytest

_LINES: list = []


@pytest.fixture(scope="session")
def criteria():
    """Collects one ``PASS``/``FAIL`` line per acceptance criterion for the terminal summary."""

    def record(name: str, passed: bool, detail: str = "") -> bool:
        _LINES.append(f"{'PASS' if passed else 'FAIL'}  {name}" + (f"  ({detail})" if detail else ""))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
