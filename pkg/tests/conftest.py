import pytest

# (number, name, passed, detail) appended by the acceptance tests
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n, name, ok, detail in sorted(ACCEPTANCE):
        tr.write_line(f"{'PASS' if ok else 'FAIL'}  AC{n:<2d} {name}: {detail}")
