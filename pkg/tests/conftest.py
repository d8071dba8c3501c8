from collections import defaultdict

import pytest

_RESULTS = defaultdict(list)  # criterion number -> [(ok, detail)]


@pytest.fixture
def criterion():
    """Record the outcome of one acceptance check; summarised per criterion at the end."""
    def record(n: int, ok: bool, detail: str):
        _RESULTS[n].append((bool(ok), detail))
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_RESULTS):
        parts = _RESULTS[n]
        ok = all(p for p, _ in parts)
        tr.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  " + "; ".join(d for _, d in parts))
