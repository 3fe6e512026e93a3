import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report():
    """Record one verdict line per acceptance criterion; printed after the run."""

    def _record(label: str, passed: bool | None, detail: str, info: bool = False) -> None:
        if info:
            status = "INFO"
        else:
            status = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
        line = f"{label}: {status} | {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
