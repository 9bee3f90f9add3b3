from contextlib import contextmanager

import pytest

# criterion number -> (passed, description), filled in by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, text = ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} #{n}: {text}")


@pytest.fixture
def criterion():
    """Record the outcome of one acceptance criterion and echo it on stdout."""
    @contextmanager
    def record(n: int, text: str):
        try:
            yield
        except BaseException:
            ACCEPTANCE[n] = (False, text)
            print(f"FAIL #{n}: {text}")
            raise
        ACCEPTANCE[n] = (True, text)
        print(f"PASS #{n}: {text}")

    return record
