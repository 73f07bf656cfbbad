import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_RESULTS = pytest.StashKey[dict]()
_NOTES = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")
    config.stash[_RESULTS] = {}
    config.stash[_NOTES] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = item.config.stash[_RESULTS].setdefault(number, {"title": title, "passed": True, "tests": 0})
    if report.when == "call":
        entry["tests"] += 1
    if report.failed or (report.when == "call" and report.skipped):
        entry["passed"] = False


@pytest.fixture
def note(request):
    """Attach a one-line measurement to the test's acceptance criterion summary."""
    marker = request.node.get_closest_marker("criterion")
    notes = request.config.stash[_NOTES]

    def add(text):
        notes.setdefault(marker.args[0], []).append(text)

    return add


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash[_RESULTS]
    if not results:
        return
    notes = config.stash[_NOTES]
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        r = results[number]
        status = "PASS" if r["passed"] and r["tests"] else "FAIL"
        line = f"criterion {number:2d} [{status}] {r['title']}"
        if notes.get(number):
            line += " -- " + "; ".join(notes[number])
        terminalreporter.write_line(line)
