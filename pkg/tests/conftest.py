import re

CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_")


def pytest_terminal_summary(terminalreporter):
    outcome = {}
    for status in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(status, []):
            m = CRITERION.search(getattr(rep, "nodeid", ""))
            if m:
                n = int(m.group(1))
                outcome[n] = outcome.get(n, True) and status == "passed"
    if not outcome:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(outcome):
        terminalreporter.write_line(f"criterion {n}: {'PASS' if outcome[n] else 'FAIL'}")
