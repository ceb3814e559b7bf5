"""Collects acceptance verdicts so they appear together at the end of a pytest run."""
import pytest

VERDICTS: dict[int, str] = {}


@pytest.fixture
def verdict(capsys):
    """``verdict(number, title, ok, detail)`` records and prints one PASS/FAIL line."""
    def record(number: int, title: str, ok: bool, detail: str = ""):
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}" + \
               (f"  [{detail}]" if detail else "")
        VERDICTS[number] = line
        with capsys.disabled():
            print("\n" + line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[number])
