import pytest

_RESULTS: dict[int, tuple[str, str]] = {}


@pytest.fixture
def acceptance(request):
    """Record a criterion's outcome (shown in the terminal summary), then assert it."""
    n = request.node.get_closest_marker("criterion").args[0]

    def record(passed: bool, detail: str) -> None:
        _RESULTS[n] = ("PASS" if passed else "FAIL", detail)
        assert passed, f"criterion {n}: {detail}"

    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker and rep.when in ("setup", "call") and rep.failed and marker.args[0] not in _RESULTS:
        _RESULTS[marker.args[0]] = ("FAIL", f"{rep.when} error: {call.excinfo.typename}: {call.excinfo.value}")


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        status, detail = _RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {detail}")
