"""Shared test configuration: acceptance-criterion summary lines."""

import pytest

_results = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    criterion = getattr(getattr(item, "function", None), "_criterion", None)
    if criterion and report.when == "call":
        _results.append((criterion, report.outcome))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in _results:
        verdict = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"[ACCEPTANCE] {name}: {verdict}")
