"""Collects the acceptance verdicts and prints them after the test run."""

import contextlib
import time

import pytest

VERDICTS: list[str] = []


@contextlib.contextmanager
def criterion(number: int, title: str, gating: bool = True):
    """Record one PASS/FAIL line for an acceptance criterion.

    A non-gating criterion is reported but never fails the test.
    """
    start = time.perf_counter()
    details: list[str] = []
    try:
        yield details
    except AssertionError as exc:
        status = "FAIL" if gating else "FAIL (non-gating)"
        details.append(str(exc).splitlines()[0] if str(exc) else "assertion failed")
        _record(number, title, status, details, start)
        if gating:
            raise
    else:
        _record(number, title, "PASS", details, start)


def _record(number, title, status, details, start):
    note = "; ".join(details)
    line = f"[criterion {number}] {status}: {title} ({time.perf_counter() - start:.1f}s)"
    if note:
        line += f" -- {note}"
    VERDICTS.append(line)
    print(line)


@pytest.fixture
def acceptance():
    return criterion


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda l: int(l.split()[1].rstrip("]"))):
            terminalreporter.write_line(line)
