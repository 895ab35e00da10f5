import numpy as np
import pytest

# Filled by tests/test_acceptance.py; printed after the run.
ACCEPTANCE = {}


def record(cid, title, passed, detail=""):
    ACCEPTANCE[cid] = (title, bool(passed), detail)
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {cid}: {title}"
    print(line + (f" ({detail})" if detail else ""))
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[cid]
        line = f"{'PASS' if passed else 'FAIL'}  {cid:>2}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))


@pytest.fixture
def rng():
    return np.random.default_rng(0)
