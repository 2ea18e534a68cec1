import re

import acceptance_registry

_OUTCOMES: dict[int, str] = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_c(\d\d)_", report.nodeid)
    if m and (report.when == "call" or report.outcome == "failed"):
        _OUTCOMES.setdefault(int(m.group(1)), report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for line in acceptance_registry.lines(_OUTCOMES):
        terminalreporter.write_line(line)
