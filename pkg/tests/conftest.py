"""Collects acceptance verdicts and prints one line per criterion at the end."""

import pytest

CRITERIA = {
    1: "contraction inequality",
    2: "coupling algebra",
    3: "backward EM correctness",
    4: "W1 oracle equivalence",
    5: "propagation-of-chaos rate",
    6: "discretization rate",
    7: "exponential decay in t",
    8: "delay rate",
    9: "uniform moment bounds",
    10: "coupled-marginal fidelity",
    11: "adaptive-grid soundness",
}

_results = {}


class AcceptanceLog:
    """Records ``(part, passed, detail)`` triples per criterion number."""

    def record(self, number, passed, detail, part=None):
        _results.setdefault(number, []).append((part, bool(passed), detail))
        return bool(passed)


@pytest.fixture(scope="session")
def acceptance():
    return AcceptanceLog()


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number, title in CRITERIA.items():
        parts = _results.get(number)
        if not parts:
            tr.write_line(f"criterion {number:2d} {title}: NOT RUN")
            continue
        verdict = "PASS" if all(ok for _, ok, _ in parts) else "FAIL"
        detail = "; ".join(f"{part}: {d}" if part else d for part, _, d in parts)
        tr.write_line(f"criterion {number:2d} {title}: {verdict} ({detail})")
