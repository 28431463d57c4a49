"""Prints one PASS/FAIL line per acceptance criterion at the end of the run.

Acceptance tests attach ``("criterion", label)`` and ``("detail", text)`` via
``record_property``; the outcome comes from the test result itself.
"""


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            if getattr(rep, "when", "call") != "call" and outcome != "error":
                continue
            props = dict(getattr(rep, "user_properties", []))
            if "criterion" in props:
                status = "PASS" if outcome == "passed" else "FAIL"
                lines.append((props["criterion"], f"{props['criterion']} {status}  {props.get('detail', '')}"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines, key=lambda t: int(t[0][1:])):
            terminalreporter.write_line(line)
