"""Per-criterion pass/fail summary for the acceptance suite."""
from collections import OrderedDict

import pytest

_OUTCOMES = OrderedDict()
_NOTES = OrderedDict()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion a test belongs to")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when not in ("setup", "call"):
        return
    n, title = marker.args
    entry = _OUTCOMES.setdefault(n, {"title": title, "passed": True, "ran": False})
    if call.excinfo is not None:
        entry["passed"] = False
    if call.when == "call":
        entry["ran"] = True


@pytest.fixture
def note(request):
    """Record a measured value; it is printed under the test's criterion in the summary."""
    marker = request.node.get_closest_marker("criterion")
    key = marker.args[0] if marker else "other"
    return lambda text: _NOTES.setdefault(key, []).append(text)


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES and not _NOTES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_OUTCOMES):
        entry = _OUTCOMES[n]
        status = "PASS" if entry["passed"] and entry["ran"] else "FAIL"
        terminalreporter.write_line(f"criterion {n}: {status}  {entry['title']}")
        for text in _NOTES.get(n, []):
            terminalreporter.write_line(f"    {text}")
    for text in _NOTES.get("other", []):
        terminalreporter.write_line(f"note: {text}")
