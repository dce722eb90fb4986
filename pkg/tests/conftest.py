import pytest

_ACCEPTANCE = {}


@pytest.fixture
def record():
    """Record an acceptance result: ``record(key, passed, detail)``."""

    def _record(key, passed, detail=""):
        prev = _ACCEPTANCE.get(key)
        ok = bool(passed) and (prev is None or prev[0])
        text = detail if prev is None else f"{prev[1]}; {detail}"
        _ACCEPTANCE[key] = (ok, text)

    return _record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE, key=lambda k: int(k.split()[0].rstrip("."))):
        ok, detail = _ACCEPTANCE[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {key}: {detail}")
