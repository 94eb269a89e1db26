"""Collects ``@pytest.mark.acceptance(name)`` outcomes and prints one PASS/FAIL line each."""
import pytest

_RESULTS = []
_DETAILS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(name): acceptance criterion reported in the summary")


@pytest.fixture
def detail(request):
    """Call with a short string to attach measurements to the summary line."""
    def record(text):
        _DETAILS[request.node.nodeid] = text
        print(text)
    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker and report.when == "call":
        _RESULTS.append((marker.args[0], report.passed, item.nodeid))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, nodeid in _RESULTS:
        extra = _DETAILS.get(nodeid, "")
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}" + (f"  ({extra})" if extra else ""))
