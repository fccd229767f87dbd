"""Shared pytest plumbing: echo acceptance-criterion verdicts in the
terminal summary so they are visible even with output capture on."""

CRITERION_LINES = []


def record_criterion(line):
    CRITERION_LINES.append(line)


def pytest_runtest_logreport(report):
    import re
    if report.skipped and "test_acceptance" in report.nodeid:
        m = re.search(r"TestCriterion(\d+)", report.nodeid)
        if m:
            reason = report.longrepr[2] if isinstance(report.longrepr, tuple) else ""
            record_criterion(f"[criterion {m.group(1)}] SKIPPED: {reason}")


def pytest_terminal_summary(terminalreporter):
    if CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in CRITERION_LINES:
            terminalreporter.write_line(line)
