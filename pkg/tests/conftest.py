def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    from semiclassical_control.acceptance import format_line

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(RESULTS):
        terminalreporter.write_line(format_line(RESULTS[cid]))
    passed = sum(r.passed for r in RESULTS.values())
    terminalreporter.write_line(f"{passed}/{len(RESULTS)} criteria passed")
