import pytest

# acceptance outcomes, printed once at the end of the run
_CRITERIA: dict[str, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def criterion():
    def record(name: str, ok: bool, detail: str = "") -> bool:
        _CRITERIA[name] = (bool(ok), detail)
        return bool(ok)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA):
        ok, detail = _CRITERIA[name]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
