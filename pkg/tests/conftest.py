import contextlib
import time

import pytest

_RESULTS = {}


class _Outcome:
    def __init__(self):
        self.detail = ""


@pytest.fixture
def criterion():
    """``with criterion(n, title) as c: ...; c.detail = "..."`` records a PASS/FAIL line."""

    @contextlib.contextmanager
    def record(number: int, title: str):
        out = _Outcome()
        start = time.perf_counter()
        try:
            yield out
        except BaseException as exc:
            reason = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
            _RESULTS[number] = (False, title, f"{out.detail} [{reason}]".strip(), time.perf_counter() - start)
            raise
        _RESULTS[number] = (True, title, out.detail, time.perf_counter() - start)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        ok, title, detail, seconds = _RESULTS[number]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {number:>2}. {title}: {detail} ({seconds:.1f} s)")
