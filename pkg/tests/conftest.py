import gc
import sys
import os

import pytest

sys.path.insert(0, os.path.dirname(__file__))

import acceptance_report  # noqa: E402
import tracking  # noqa: E402
from trustee import Runtime  # noqa: E402


@pytest.fixture
def runtime_factory():
    made = []

    def make(**kw):
        rt = Runtime(**kw).start()
        made.append(rt)
        return rt

    yield make
    for rt in made:
        rt.shutdown()


@pytest.fixture
def rt1(runtime_factory):
    return runtime_factory(worker_threads=1)


@pytest.fixture
def rt2(runtime_factory):
    return runtime_factory(worker_threads=2)


@pytest.fixture
def rt4(runtime_factory):
    return runtime_factory(worker_threads=4)


_audit: dict = {}


def pytest_sessionfinish(session, exitstatus):
    gc.collect()
    bad = tracking.problems()
    _audit.update(count=len(tracking.created), bad=bad)
    tr = session.config.pluginmanager.get_plugin("terminalreporter")
    if tr is not None:
        tr.write_line(
            f"destructor audit: {len(tracking.created)} tracked properties, "
            + ("every destructor ran exactly once" if not bad else f"{len(bad)} problems: {bad[:5]}")
        )
    if bad:
        session.exitstatus = 1


def pytest_terminal_summary(terminalreporter):
    lines = dict(acceptance_report.lines)
    if not lines:
        return
    if 4 in lines and _audit:
        ok = not _audit["bad"] and " PASS" in lines[4]
        verdict = "PASS" if ok else "FAIL"
        lines[4] = (
            f"criterion  4 {verdict}: {lines[4].split(': ', 1)[1]}; "
            f"whole-session audit {_audit['count']} tracked properties, {len(_audit['bad'])} problems"
        )
    terminalreporter.section("acceptance criteria")
    for k in sorted(lines):
        terminalreporter.write_line(lines[k])
