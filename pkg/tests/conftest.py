import json
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ORACLES = json.loads((Path(__file__).parent / "oracles" / "oracles.json").read_text())


@pytest.fixture(scope="session")
def oracle():
    return ORACLES


_ACCEPTANCE_KEY = pytest.StashKey[list]()


class AcceptanceLog:
    """Collects one verdict line per acceptance criterion for the terminal summary."""

    def __init__(self, lines: list):
        self.lines = lines

    def record(self, number: int, title: str, passed: bool, detail: str) -> None:
        line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}  ({detail})"
        self.lines.append((number, line))
        print(line)


@pytest.fixture(scope="session")
def acceptance_log(request):
    return AcceptanceLog(request.config.stash.setdefault(_ACCEPTANCE_KEY, []))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
