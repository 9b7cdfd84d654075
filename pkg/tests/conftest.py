import re

import pytest

ACCEPTANCE = {}


@pytest.fixture
def criterion(request):
    """Record one pass/fail line for an acceptance criterion test."""
    m = re.match(r"test_criterion_(\d+)", request.node.name)
    num = int(m.group(1))

    def record(ok: bool, detail: str) -> bool:
        line = f"criterion {num}: {'PASS' if ok else 'FAIL'} - {detail}"
        ACCEPTANCE[num] = line
        print(line)
        return ok

    yield record
    ACCEPTANCE.setdefault(num, f"criterion {num}: FAIL - did not complete")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
