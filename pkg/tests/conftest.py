import warnings

import pytest

warnings.filterwarnings("ignore", message=".*TBB.*")

# criterion number -> list of (part, passed, detail), filled by tests/test_acceptance.py
ACCEPTANCE = {}


@pytest.fixture(scope="session")
def acceptance():
    def record(criterion, part, passed, detail):
        ACCEPTANCE.setdefault(criterion, []).append((part, bool(passed), detail))
        return bool(passed)
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for c in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[c]
        verdict = "PASS" if all(ok for _, ok, _ in parts) else "FAIL"
        detail = "; ".join(f"{name}: {'ok' if ok else 'FAILED'} ({d})" for name, ok, d in parts)
        terminalreporter.write_line(f"criterion {c}: {verdict} | {detail}")
