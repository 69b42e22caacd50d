from acceptance_log import OUTCOMES


def pytest_terminal_summary(terminalreporter):
    if not OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(OUTCOMES):
        title, ok, detail = OUTCOMES[number]
        terminalreporter.write_line(f"[{number:2d}] {'PASS' if ok else 'FAIL'}  {title}: {detail}")
