"""Shared pytest hooks: collect acceptance-criterion outcomes and print them at the end."""

import contextlib
import time

import pytest

_CRITERIA: dict = {}


@pytest.fixture
def criterion():
    """``with criterion(n, title): ...`` records PASS/FAIL for acceptance criterion ``n``."""

    @contextlib.contextmanager
    def record(number: int, title: str):
        start = time.perf_counter()
        detail = {}
        try:
            yield detail
        except BaseException as exc:
            _CRITERIA[number] = (title, False, f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}",
                                 time.perf_counter() - start)
            raise
        note = " ".join(f"{k}={v}" for k, v in detail.items())
        _CRITERIA[number] = (title, True, note, time.perf_counter() - start)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok, note, seconds = _CRITERIA[number]
        line = f"criterion {number} {'PASS' if ok else 'FAIL'} {title} ({seconds:.1f} s)"
        terminalreporter.write_line(line + (f" {note}" if note else ""))
