import pytest

VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    lines = request.config.stash.setdefault(VERDICTS, [])

    def record(number: int, checks: dict, detail: str, seconds: float):
        failed = [name for name, ok in checks.items() if not ok]
        status = "FAIL" if failed else "PASS"
        line = f"criterion {number}: {status} ({seconds:.1f}s) {detail}"
        if failed:
            line += f" | failed: {', '.join(failed)}"
        lines.append(line)
        print(line)
        assert not failed, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
