import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

# criterion number -> {"title": str, "ok": bool, "notes": [str]}
_CRITERIA: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or not marker.args:
        return
    number, title = marker.args[0], marker.args[1]
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "notes": []})
    if report.when == "call" or report.failed:
        entry["ok"] = entry["ok"] and report.passed
        entry["notes"] += [str(v) for k, v in item.user_properties if k == "measured"]
        if report.failed:
            entry["notes"].append(f"{item.name} failed")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        status = "PASS" if entry["ok"] else "FAIL"
        notes = "; ".join(entry["notes"])
        terminalreporter.write_line(f"criterion {number}: {status}  {entry['title']}  [{notes}]")
