import pytest
from hypothesis import settings

# numba compiles on first call, which blows through per-example deadlines
settings.register_profile("ctxemo", deadline=None)
settings.load_profile("ctxemo")

_criteria = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.skipped):
        status = "SKIP" if rep.skipped else ("PASS" if rep.passed else "FAIL")
        _criteria.append((mark.args[0], status, item.name))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    by_num = {}
    for num, status, name in _criteria:
        by_num.setdefault(num, []).append((status, name))
    for num in sorted(by_num):
        statuses = [s for s, _ in by_num[num]]
        overall = "FAIL" if "FAIL" in statuses else ("PASS" if "PASS" in statuses else "SKIP")
        detail = ", ".join(f"{n} {s}" for s, n in by_num[num]) if overall == "FAIL" else f"{len(statuses)} test(s)"
        terminalreporter.write_line(f"{overall} criterion {num:>2}: {detail}")
