import pytest

_RESULTS = {}


class CriterionLog:
    """Collects one PASS/FAIL line per acceptance criterion."""

    def record(self, number, title, passed, detail=""):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {title}" + (f" ({detail})" if detail else "")
        _RESULTS[number] = line
        print(line)
        return passed


@pytest.fixture(scope="session")
def criterion():
    return CriterionLog()


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        terminalreporter.write_line(_RESULTS[number])
