import pytest

# criterion number -> (title, passed, detail); filled by test_acceptance.py
ACCEPTANCE_RESULTS = {}


@pytest.fixture
def record_criterion():
    def record(number: int, title: str, passed: bool, detail: str = ""):
        ACCEPTANCE_RESULTS[number] = (title, bool(passed), detail)
        line = f"criterion {number:>2} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
        print(line)
        return line

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        title, passed, detail = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"criterion {number:>2} [{'PASS' if passed else 'FAIL'}] {title}: {detail}")
