import time

import pytest

_RESULTS = {}


class CriterionRecorder:
    """Collects one verdict per acceptance criterion for the terminal summary."""

    def __init__(self):
        self.t0 = None

    def start(self):
        self.t0 = time.perf_counter()

    def check(self, number, title, ok, detail="", budget=None):
        elapsed = time.perf_counter() - self.t0 if self.t0 is not None else float("nan")
        if budget is not None and elapsed > budget:
            ok = False
            detail = f"{detail}; runtime {elapsed:.1f}s over budget {budget:.0f}s"
        verdict = "PASS" if ok else "FAIL"
        line = f"{verdict} criterion {number:2d} {title}: {detail} ({elapsed:.1f}s)"
        _RESULTS[number] = line
        print(line)
        return ok


@pytest.fixture
def criterion():
    rec = CriterionRecorder()
    rec.start()
    return rec


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_RESULTS):
        terminalreporter.write_line(_RESULTS[k])
