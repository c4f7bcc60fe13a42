import pytest

_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    n, title = mark.args
    if rep.when != "call" and n in _CRITERIA:
        return
    status = "PASS" if rep.passed else ("ERROR" if rep.when != "call" else "FAIL")
    _CRITERIA[n] = (title, status, dict(item.user_properties).get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n} {status:<5} {title}: {detail}")
