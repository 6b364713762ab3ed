"""Shared pytest plumbing: the acceptance summary block.

test_acceptance.py holds one test per numbered shipping criterion; after the
run this hook prints a single PASS/FAIL line for each so the gate can be read
off the bottom of the log without scrolling.
"""

import re

CRITERION_TITLES = {
    1: "analytic gradients match finite differences (9 ops, 20 seeds, <=1e-5, <=60s)",
    2: "sampling and summation splatting are adjoint (1e-10, 100 instances)",
    3: "summation conserves mass; average splat of ones is exactly 1 where covered",
    4: "softmax splat degenerates to average at constant Z and picks the higher-Z source",
    5: "pyramid/lookup/GRU/metrics/loss match naive loop oracles (loss 1e-12, worked 1.35)",
    6: "flow codecs reproduce committed golden bytes exactly",
    7: "trained final_to_all cuts occluded EPE >=10% vs none, noc within 5%, <=45 min",
    8: "final_to_all orders no worse than final_to_final and one_to_one on EPE-all",
    9: "training and evaluation are bitwise deterministic under a fixed seed",
}

_PATTERN = re.compile(r"test_criterion_(\d+)")


def pytest_terminal_summary(terminalreporter):
    outcomes = {}
    for category in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(category, []):
            match = _PATTERN.search(getattr(report, "nodeid", ""))
            if match and getattr(report, "when", "call") in ("call", "setup"):
                n = int(match.group(1))
                verdict = "PASS" if category == "passed" else "FAIL"
                # a failed setup/teardown must not mask a failed call
                if outcomes.get(n) != "FAIL":
                    outcomes[n] = verdict
    if not outcomes:
        return
    writer = terminalreporter
    writer.write_sep("=", "acceptance criteria")
    for n in sorted(outcomes):
        title = CRITERION_TITLES.get(n, "")
        writer.write_line(f"CRITERION {n} {outcomes[n]} - {title}")
