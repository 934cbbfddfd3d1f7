"""Shared pytest wiring: re-print acceptance verdict lines after the run."""


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import VERDICTS
    except Exception:
        return
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
