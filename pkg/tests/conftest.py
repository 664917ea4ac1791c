"""Collects one result line per acceptance criterion and prints them after the run."""

ACCEPTANCE: dict = {}


def record(number: int, name: str, passed: bool, detail: str = "") -> None:
    ACCEPTANCE[number] = (name, passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        name, passed, detail = ACCEPTANCE[number]
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:2d}: {name}"
        terminalreporter.write_line(line + (f" | {detail}" if detail else ""))
