"""Shared pytest wiring: collect acceptance verdict lines for the summary."""

_verdicts: list[str] = []


def record_verdict(line: str) -> None:
    _verdicts.append(line)
    print(line, flush=True)


def pytest_terminal_summary(terminalreporter):
    if _verdicts:
        terminalreporter.section("acceptance criteria")
        for line in _verdicts:
            terminalreporter.write_line(line)
