"""Acceptance bookkeeping: tests marked ``criterion(n, title)`` get one
PASS/FAIL line each, printed in the terminal summary."""

import pytest

DETAIL = pytest.StashKey[str]()
LINES = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): numbered acceptance criterion")
    config.stash[LINES] = {}


@pytest.fixture
def note(request):
    """Attach a short measurement string to the criterion line of this test."""
    def set_note(text):
        request.node.stash[DETAIL] = text
    return set_note


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.skipped:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        n, title = marker.args
        status = "PASS" if rep.passed else "FAIL"
        detail = item.stash.get(DETAIL, "")
        line = f"criterion {n:2d} {status}: {title}" + (f" -- {detail}" if detail else "")
        item.config.stash[LINES][n] = line
        print("\n" + line)


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(LINES, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
