ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail, seconds = ACCEPTANCE[k]
        terminalreporter.write_line(
            f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  ({seconds:.1f} s) {detail}")
