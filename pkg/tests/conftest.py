"""Shared pytest hooks: a one-line verdict per acceptance criterion.

The acceptance suite (tests/test_acceptance.py) names its tests
``test_criterion_<n>_...``; after the run a summary section lists each
criterion with PASS / FAIL / NOT RUN so the end-to-end checks can be read
at a glance.
"""

import re

CRITERIA = {
    1: "oracle equivalence (CTC + transducer vs enumeration)",
    2: "gradient suite (finite differences < 1e-3)",
    3: "biasing-target fidelity (dummy substitution example)",
    4: "directional contextualization (B-WER <= 0.7x baseline at M=10)",
    5: "distractor degradation (B-WER M=10 <= M=100)",
    6: "joint decoding mitigation (U-WER at M=100; mu_ctc=0 reduction)",
    7: "baseline reduction (zeroed CB == bias-free model, exact)",
    8: "metric decomposition (error split + report format)",
    9: "overfit sanity (10-utterance loss < 20% of initial)",
}

_PATTERN = re.compile(r"test_criterion_(\d+)")
_outcomes: dict[int, str] = {}


def pytest_runtest_logreport(report):
    match = _PATTERN.search(report.nodeid)
    if not match or "test_acceptance" not in report.nodeid:
        return
    n = int(match.group(1))
    if report.when == "call":
        _outcomes[n] = "PASS" if report.passed else "FAIL"
    elif report.when == "setup" and not report.passed:
        _outcomes[n] = "FAIL (setup)" if report.failed else "SKIPPED"


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        verdict = _outcomes.get(n, "NOT RUN")
        terminalreporter.write_line(f"criterion {n} [{verdict}] {CRITERIA[n]}")
