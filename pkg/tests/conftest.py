"""Shared pytest wiring: surface the acceptance PASS/FAIL lines.

The acceptance tests record one line per criterion; printing happens inside
captured test output, so the collected lines are replayed in the terminal
summary (and dropped into acceptance_report.txt) where they stay visible.
"""

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)
    try:
        with open(config.rootpath / "acceptance_report.txt", "w") as fh:
            fh.write("\n".join(ACCEPTANCE_LINES) + "\n")
    except OSError:
        pass
