import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

TITLES = {
    1: "one-link optimal value",
    2: "bang-bang structure",
    3: "v_m oracle equivalence",
    4: "friction regime trichotomy",
    5: "idle optimum in the backward regime",
    6: "catching-up exactness",
    7: "mesh convergence of J",
    8: "anchored problem convergence",
    9: "certificate soundness",
    10: "BV regularization",
    11: "rate independence",
    12: "determinism",
}

_results = {}


@pytest.fixture
def criterion():
    """Record ``(passed, detail)`` for an acceptance criterion."""
    def record(number, passed, detail):
        _results[number] = (bool(passed), detail)
        return bool(passed)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for k in sorted(TITLES):
        if k in _results:
            ok, detail = _results[k]
            tr.write_line(f"criterion {k:>2} {'PASS' if ok else 'FAIL'}  "
                          f"{TITLES[k]}: {detail}")
        else:
            tr.write_line(f"criterion {k:>2} NOT RUN  {TITLES[k]}")
