"""Shared test plumbing.

Acceptance tests are marked with @pytest.mark.acceptance("<criterion>");
the terminal summary prints one PASS/FAIL line per criterion so a run's
verdict is readable without scrolling the full pytest output.
"""

from __future__ import annotations

import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

_ACCEPTANCE_RESULTS: dict[str, str] = {}


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "acceptance(criterion): acceptance criterion label"
    )


def pytest_runtest_logreport(report):
    if report.when != "call":
        return
    criterion = getattr(report, "_acceptance_criterion", None)
    if criterion is not None:
        _ACCEPTANCE_RESULTS[criterion] = (
            "PASS" if report.outcome == "passed" else "FAIL"
        )


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is not None and marker.args:
        report._acceptance_criterion = marker.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, verdict in _ACCEPTANCE_RESULTS.items():
        terminalreporter.write_line(f"{verdict}  {criterion}")
