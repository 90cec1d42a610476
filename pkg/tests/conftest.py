import pytest

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): numbered acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n = mark.args[0]
    if report.when == "call" or (report.failed and report.when == "setup"):
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "summary")
        passed = report.passed and report.when == "call"
        prev = _CRITERIA.get(n)
        # a criterion split across several tests passes only if all of them pass
        if prev is not None:
            passed = passed and prev[0]
            detail = "; ".join(d for d in (prev[1], detail) if d)
        _CRITERIA[n] = (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        passed, detail = _CRITERIA[n]
        line = f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}"
        terminalreporter.write_line(f"{line}  {detail}" if detail else line)
