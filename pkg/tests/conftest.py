"""Shared fixtures: the cached toy training run and the acceptance summary.

Acceptance tests call the `accept` fixture's finisher with their wall-clock
budget and a one-line result; the lines are replayed in the terminal summary
so a full run ends with one PASS/FAIL line per guarantee.
"""

import time

import pytest

_LINES: list[str] = []


@pytest.fixture
def accept(request):
    """Times the test body; finisher asserts the budget and records a line."""
    t0 = time.monotonic()

    def done(budget_s: float, detail: str):
        elapsed = time.monotonic() - t0
        line = f"PASS {request.node.name} [{elapsed:.1f}s/{budget_s:.0f}s] {detail}"
        assert elapsed <= budget_s, (
            f"{request.node.name}: {elapsed:.1f}s over the {budget_s:.0f}s budget")
        _LINES.append(line)

    return done


@pytest.fixture(scope="session")
def toy_bundle():
    """Trained toy tokenizer + velocity model, cached under artifacts/."""
    import toyrun
    return toyrun.ensure_toy_run()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    failed = [rep.nodeid.split("::")[-1]
              for rep in terminalreporter.stats.get("failed", [])
              if "test_acceptance" in rep.nodeid]
    if _LINES or failed:
        terminalreporter.section("acceptance")
        for line in _LINES:
            terminalreporter.write_line(line)
        for name in failed:
            terminalreporter.write_line(f"FAIL {name}")
