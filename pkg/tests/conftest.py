import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import pytest

# acceptance criterion id -> (title, [outcomes]); filled from tests marked ``criterion``
CRITERIA = {}
NOTES = {}


@pytest.fixture
def note(request):
    """Attach a short measurement string to the current test's criterion line."""
    m = request.node.get_closest_marker("criterion")

    def add(text):
        NOTES.setdefault(m.args[0], []).append(text)

    return add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is None or rep.skipped:
        return
    if rep.when == "call" or rep.failed:
        CRITERIA.setdefault(m.args[0], [m.args[1], []])[1].append(rep.passed)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(CRITERIA):
        title, oks = CRITERIA[k]
        status = "PASS" if oks and all(oks) else "FAIL"
        extra = "; ".join(NOTES.get(k, []))
        terminalreporter.write_line(f"AC{k} {status} {title}" + (f" [{extra}]" if extra else ""))
