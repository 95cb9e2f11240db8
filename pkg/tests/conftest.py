import re
from collections import defaultdict

CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)")

_outcomes: dict = defaultdict(list)
_notes: dict = defaultdict(list)


def pytest_runtest_logreport(report):
    m = CRITERION.search(report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    if report.when == "call" or report.outcome != "passed":
        _outcomes[n].append(report.outcome == "passed")
    if report.when == "call":
        _notes[n].extend(f"{k}={v}" for k, v in report.user_properties)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_outcomes):
        status = "PASS" if all(_outcomes[n]) else "FAIL"
        notes = "  " + " ".join(_notes[n]) if _notes[n] else ""
        terminalreporter.write_line(f"criterion {n:2d}: {status}{notes}")
