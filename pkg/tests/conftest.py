import time

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title, budget): acceptance criterion with a runtime "
                                       "budget in seconds")


@pytest.hookimpl(wrapper=True)
def pytest_runtest_call(item):
    mark = item.get_closest_marker("criterion")
    t0 = time.perf_counter()
    try:
        res = yield
    except BaseException:
        if mark:
            _RESULTS[mark.args[0]] = (mark.args[1], False, time.perf_counter() - t0, mark.args[2])
        raise
    if mark:
        elapsed = time.perf_counter() - t0
        ok = elapsed < mark.args[2]
        _RESULTS[mark.args[0]] = (mark.args[1], ok, elapsed, mark.args[2])
        if not ok:
            raise AssertionError(f"runtime {elapsed:.1f} s exceeds the {mark.args[2]} s budget")
    return res


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_RESULTS):
        title, ok, elapsed, budget = _RESULTS[n]
        tr.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}  ({elapsed:.1f} s of {budget} s)")
