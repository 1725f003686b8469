"""Shared hooks: collect acceptance outcomes and print one line per criterion."""
import pytest

_outcomes: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    number, title = mark.args
    entry = _outcomes.setdefault(number, {"title": title, "passed": True, "tests": 0})
    entry["tests"] += rep.when == "call"
    entry["passed"] &= rep.passed


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_outcomes):
        e = _outcomes[number]
        status = "PASS" if e["passed"] else "FAIL"
        terminalreporter.write_line(f"AC{number:<3d}{status}  {e['title']} ({e['tests']} tests)")
