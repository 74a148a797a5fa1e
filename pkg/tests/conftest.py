"""Prints the acceptance report collected by ``test_acceptance`` after the run."""


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import REPORT
    except ImportError:
        return
    if not REPORT:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(REPORT):
        terminalreporter.write_line(REPORT[number])
