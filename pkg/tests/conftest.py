"""Shared pytest hooks: one PASS/FAIL line per acceptance criterion."""

import pytest

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    if rep.when == "setup" and rep.passed:
        return
    n = mark.args[0]
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    if rep.failed and call.excinfo is not None:
        msg = call.excinfo.exconly().splitlines()[0]
        if msg.split(": ", 1)[-1] not in detail:
            detail = f"{detail}; {msg}" if detail else msg
    status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
    _RESULTS[(n, item.name)] = (status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for (n, name), (status, detail) in sorted(_RESULTS.items()):
        terminalreporter.write_line(f"criterion {n:>2} {status}  {name}: {detail}")
