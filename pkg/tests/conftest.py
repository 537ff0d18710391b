"""Acceptance bookkeeping: one pass/fail line per criterion at the end of the run."""

import pytest

_RESULTS: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


def _criterion(item):
    m = item.get_closest_marker("criterion")
    return (m.args[0], m.args[1]) if m else None


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    crit = _criterion(item)
    if crit is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        number, title = crit
        detail = dict(item.user_properties).get("detail", "")
        prev = _RESULTS.get(number)
        passed = rep.passed and (prev is None or prev[1])
        _RESULTS[number] = (title, passed, detail if detail or prev is None else prev[2],
                            "skipped" if rep.skipped else "")


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_RESULTS):
        title, passed, detail, note = _RESULTS[number]
        status = "SKIP" if note == "skipped" else ("PASS" if passed else "FAIL")
        line = f"criterion {number:>2}  {status}  {title}"
        if detail:
            line += f"  [{detail}]"
        tr.write_line(line)
