import acceptance_log


def pytest_terminal_summary(terminalreporter):
    rows = acceptance_log.lines()
    if rows:
        terminalreporter.write_sep("=", "acceptance criteria")
        for row in rows:
            terminalreporter.write_line(row)
