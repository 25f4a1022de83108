"""Collects one pass/fail line per acceptance criterion for the terminal summary."""

import pytest

_CRITERIA = {}


class CriterionLog:
    def record(self, number, title, passed, detail="", flagged=False):
        status = "FLAG" if flagged and not passed else ("PASS" if passed else "FAIL")
        _CRITERIA[number] = f"criterion {number:>2} [{status}] {title}: {detail}"


@pytest.fixture(scope="session")
def criteria():
    return CriterionLog()


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[number])
