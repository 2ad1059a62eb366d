import pytest

# (label, passed, detail) rows filled in by test_acceptance, in run order
ACCEPTANCE_ROWS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_ROWS:
        return
    terminalreporter.section("acceptance criteria")
    for label, ok, detail in ACCEPTANCE_ROWS:
        terminalreporter.write_line(f"{label}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def record():
    def add(label, ok, detail):
        ACCEPTANCE_ROWS.append((label, bool(ok), detail))
        print(f"{label}: {'PASS' if ok else 'FAIL'}  {detail}")

    return add
