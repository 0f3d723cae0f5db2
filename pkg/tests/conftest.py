"""Shared pytest plumbing: the acceptance scorecard."""

SCORECARD: dict[str, str] = {}


def record_criterion(name: str, passed: bool, detail: str = "") -> None:
    SCORECARD[name] = f"{'PASS' if passed else 'FAIL'}{' - ' + detail if detail else ''}"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not SCORECARD:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(SCORECARD):
        terminalreporter.write_line(f"{name}: {SCORECARD[name]}")
