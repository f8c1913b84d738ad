import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

_ACCEPTANCE: dict[int, list] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or rep.failed):
        return
    number, title = marker.args
    detail = dict(rep.user_properties).get("detail", "")
    entry = _ACCEPTANCE.setdefault(number, [title, True, 0.0, []])
    entry[1] = entry[1] and rep.passed
    entry[2] += rep.duration
    if detail:
        entry[3].append(detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, ok, seconds, details = _ACCEPTANCE[number]
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}  ({seconds:.1f} s)"
        terminalreporter.write_line(line)
        for d in details:
            for sub in d.splitlines():
                terminalreporter.write_line("    " + sub)
