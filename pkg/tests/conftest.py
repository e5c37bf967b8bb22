from __future__ import annotations

import contextlib

import pytest

# (criterion number, title, verdict, details) in completion order
_VERDICTS: list[tuple[int, str, str, str]] = []


class Criterion:
    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.details: list[str] = []

    def note(self, text: str) -> None:
        self.details.append(text)


@pytest.fixture
def criterion():
    """``with criterion(n, title) as c:`` records one PASS/FAIL line for the summary."""

    @contextlib.contextmanager
    def run(number: int, title: str):
        c = Criterion(number, title)
        try:
            yield c
        except BaseException:
            _VERDICTS.append((number, title, "FAIL", "; ".join(c.details)))
            raise
        _VERDICTS.append((number, title, "PASS", "; ".join(c.details)))

    return run


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, verdict, details in sorted(_VERDICTS):
        line = f"criterion {number} [{title}]: {verdict}"
        terminalreporter.write_line(line + (f" ({details})" if details else ""))
