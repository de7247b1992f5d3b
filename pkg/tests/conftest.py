import pytest

_RESULTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_RESULTS] = {}
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number reported in the summary")


@pytest.fixture
def record(request):
    """``record(ok, detail)`` stores the outcome line for this test's criterion."""
    n = request.node.get_closest_marker("criterion").args[0]

    def _record(ok, detail):
        request.config.stash[_RESULTS][n] = (bool(ok), detail)
        return bool(ok)

    return _record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call":
        return
    results = item.config.stash[_RESULTS]
    n = marker.args[0]
    if n not in results:
        results[n] = (report.passed, "no detail recorded")
    elif report.failed and results[n][0]:
        results[n] = (False, results[n][1] + " (test failed)")


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash[_RESULTS]
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
