"""Shared pytest plumbing: the acceptance suite's one-line-per-criterion summary."""

import pytest

_CRITERIA: list[tuple[str, bool, str]] = []


@pytest.fixture
def criterion(request):
    """Record the outcome of one acceptance criterion.

    Call the returned function once with (passed, detail); the line is
    printed in the terminal summary whether or not the assertion that
    follows fails.
    """
    name = request.node.get_closest_marker("criterion").args[0]

    def record(passed: bool, detail: str) -> None:
        _CRITERIA.append((name, bool(passed), detail))
        print(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")

    return record


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the summary")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in _CRITERIA:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
