"""Collects acceptance outcomes and prints one line per criterion at the end of the run."""

import pytest

_OUTCOMES: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        n = mark.args[0]
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        ok = rep.passed
        prev = _OUTCOMES.get(n)
        if prev is None:
            _OUTCOMES[n] = [ok, [detail] if detail else []]
        else:
            prev[0] = prev[0] and ok
            if detail:
                prev[1].append(detail)


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_OUTCOMES):
        ok, details = _OUTCOMES[n]
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}"
        if details:
            line += "  " + " | ".join(details)
        terminalreporter.write_line(line)
