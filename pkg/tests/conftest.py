import pytest

# criterion id -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def record(cid: int, title: str, passed: bool, detail: str = "") -> None:
    ACCEPTANCE[cid] = (title, bool(passed), detail)


@pytest.fixture
def acceptance_record():
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[cid]
        tr.write_line(f"{'PASS' if ok else 'FAIL'}  C{cid:<2d} {title}: {detail}")
