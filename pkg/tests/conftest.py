import pytest

_ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    """``report(number, title, passed, detail)`` records one line for the summary."""
    def report(number, title, passed, detail):
        _ACCEPTANCE[number] = f"criterion {number} {'PASS' if passed else 'FAIL'}: {title} -- {detail}"
        print(_ACCEPTANCE[number])
    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[number])
