"""Collects acceptance-criterion outcomes and prints one line per criterion at the end of the run."""

import pytest

_RESULTS = {}


@pytest.fixture
def criterion(request):
    """Call ``criterion(n, title)``; add measurements with ``.note(text)``."""
    class Recorder:
        def __init__(self):
            self.notes = []

        def __call__(self, number, title):
            self.number, self.title = number, title
            _RESULTS[request.node.nodeid] = self
            return self

        def note(self, text):
            self.notes.append(str(text))

    return Recorder()


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    rec = _RESULTS.get(item.nodeid)
    if rec is not None and report.when == "call":
        rec.passed = report.passed


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for rec in sorted(_RESULTS.values(), key=lambda r: r.number):
        status = "PASS" if getattr(rec, "passed", False) else "FAIL"
        detail = f" ({'; '.join(rec.notes)})" if rec.notes else ""
        terminalreporter.write_line(f"[{status}] criterion {rec.number:>2}: {rec.title}{detail}")
