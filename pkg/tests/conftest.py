from __future__ import annotations

import pytest

RESULT_LINES: list = []


@pytest.fixture
def report_line():
    """Record one pass/fail line; printed again in the terminal summary."""

    def record(criterion: int, passed: bool, detail: str) -> None:
        line = f"criterion {criterion:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        RESULT_LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if RESULT_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULT_LINES):
            terminalreporter.write_line(line)
