"""Collects acceptance verdict lines and re-emits them after the test run,
so `pytest -v` shows one pass/fail line per criterion even with capture on."""

ACCEPTANCE_VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_VERDICTS:
            terminalreporter.write_line(line)
