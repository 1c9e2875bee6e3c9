"""Shared test setup: hypothesis profile and the acceptance summary."""

import sys
from pathlib import Path

import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")

FIXTURES = Path(__file__).parent / "fixtures"

_criteria = {}


@pytest.fixture
def fixtures_dir():
    return FIXTURES


def pytest_runtest_logreport(report):
    marker = dict(report.user_properties).get("criterion")
    if marker is None:
        return
    cid, title = marker
    status = _criteria.get(cid, (title, "PASS", ""))[1]
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        if report.skipped:
            reason = report.longrepr[2] if isinstance(report.longrepr, tuple) else ""
            _criteria[cid] = (title, "N/A", reason)
            return
        if report.failed:
            status = "FAIL"
        _criteria[cid] = (title, status, "")


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            item.user_properties.append(("criterion", (m.args[0], m.args[1])))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for cid in sorted(_criteria):
        title, status, reason = _criteria[cid]
        line = f"[{status}] {cid}. {title}"
        if reason:
            line += f" ({reason.removeprefix('Skipped: ')})"
        tr.write_line(line)
