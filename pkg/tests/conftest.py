"""Collects acceptance verdicts and prints them after the test session."""

VERDICTS: dict[int, str] = {}


def record_verdict(number: int, name: str, ok: bool, detail: str) -> None:
    VERDICTS[number] = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {name}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        terminalreporter.write_line(VERDICTS[n])
