import pytest

_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n): acceptance criterion number n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or (report.when != "call" and not report.failed):
        return
    detail = dict(item.user_properties).get("detail", "")
    if report.failed:
        crash = getattr(report.longrepr, "reprcrash", None)
        msg = crash.message.splitlines()[0] if crash else str(report.longrepr).splitlines()[-1]
        detail = f"{detail}; {msg}" if detail else msg
    _ACCEPTANCE[mark.args[0]] = (report.passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"ACCEPTANCE #{n} {'PASS' if ok else 'FAIL'}: {detail}")
