"""Shared fixtures and the acceptance summary printed at the end of a run."""
import os

import pytest

# one line per acceptance criterion, filled by tests/test_acceptance.py
ACCEPTANCE = {}


def record(number: int, title: str, passed: bool, detail: str = ""):
    """Store and print the verdict line of one acceptance criterion."""
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {title}"
    if detail:
        line += f" | {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])


@pytest.fixture
def tmp_out(tmp_path, monkeypatch):
    monkeypatch.setenv("STABLECONE_OUT_DIR", str(tmp_path / "runs"))
    return tmp_path


@pytest.fixture(scope="session")
def threads():
    return int(os.environ.get("STABLECONE_TEST_THREADS", "1"))
