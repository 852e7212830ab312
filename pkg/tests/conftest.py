import pytest

RESULTS: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion(capsys):
    """record(n, ok, detail): print one PASS/FAIL line and assert."""

    def record(n: int, ok: bool, detail: str) -> None:
        ok = bool(ok)
        RESULTS[n] = (ok, detail)
        with capsys.disabled():
            print(f"\n[acceptance {n:2d}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail

    return record


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, detail = RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
