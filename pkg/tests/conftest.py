"""Collects the acceptance verdicts and repeats them at the end of the run."""

VERDICTS = []


def record(number, title, passed, detail):
    line = f"criterion {number} {'PASS' if passed else 'FAIL'}: {title} ({detail})"
    VERDICTS.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
