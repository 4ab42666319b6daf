import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

CRITERIA = {
    1: "gradient correctness (finite differences, full encodings)",
    2: "LCA / pair-feature oracle on random tries",
    3: "reduction to the vanilla backbone, bit-identical",
    4: "decode validity and exhaustive-rank equivalence",
    5: "attention rows normalised under random bias and masks",
    6: "tokenizer invariants",
    7: "directional synthetic ablation ordering",
    8: "training-step overhead with feature caching",
    9: "metric closed forms",
    10: "data protocol (k-core, leave-one-out, history cap)",
}

_outcomes = {}   # criterion -> list of (nodeid, outcome, notes)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion the test checks")


def pytest_runtest_logreport(report):
    crit = getattr(report, "criterion", None)
    if crit is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        outcome = "skipped" if report.skipped else report.outcome
        notes = [f"{k}={v}" for k, v in report.user_properties]
        _outcomes.setdefault(crit, []).append((report.nodeid, outcome, notes))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result().criterion = marker.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for crit in sorted(CRITERIA):
        results = _outcomes.get(crit)
        if not results:
            tr.write_line(f"criterion {crit:2d} NOT RUN  {CRITERIA[crit]}")
            continue
        states = {o for _, o, _ in results}
        verdict = "FAIL" if "failed" in states else ("SKIP" if states == {"skipped"} else "PASS")
        notes = [n for _, _, ns in results for n in ns]
        extra = f"  [{'; '.join(notes)}]" if notes else ""
        tr.write_line(f"criterion {crit:2d} {verdict:8s} {CRITERIA[crit]} "
                      f"({len(results)} checks){extra}")
