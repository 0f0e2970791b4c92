"""Collects acceptance-test outcomes and prints one line per criterion."""

import re
from collections import OrderedDict

_outcomes: "OrderedDict[int, list]" = OrderedDict()
_seconds: dict = {}
_PATTERN = re.compile(r"test_criterion_(\d+)")


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    m = _PATTERN.search(report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    _seconds[n] = _seconds.get(n, 0.0) + report.duration
    if report.when == "call" or report.outcome != "passed":
        _outcomes.setdefault(n, []).append((report.nodeid.split("::")[-1], report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    from test_acceptance import CRITERIA

    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_outcomes):
        parts = _outcomes[n]
        failed = [name for name, outcome in parts if outcome != "passed"]
        line = (f"criterion {n}: {'FAIL' if failed else 'PASS'} ({_seconds[n]:.1f} s) "
                f"{CRITERIA.get(n, '')}")
        if failed:
            line += " | failing: " + ", ".join(failed)
        tr.write_line(line)
