def pytest_terminal_summary(terminalreporter):
    """One verdict line per acceptance criterion, after the normal summary."""
    rows = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(rep, "user_properties", []))
            if "criterion" not in props:
                continue
            if outcome == "passed" and rep.when != "call":
                continue
            verdict = "PASS" if outcome == "passed" else "FAIL"
            key = props["criterion"]
            if rows.get(key, ("PASS",))[0] != "FAIL":
                rows[key] = (verdict, props["title"])
    if rows:
        terminalreporter.section("acceptance criteria")
        for number in sorted(rows):
            verdict, title = rows[number]
            terminalreporter.write_line(f"criterion {number}: {verdict}  {title}")
