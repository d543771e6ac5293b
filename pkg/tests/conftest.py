import numpy as np
import pytest
from hypothesis import settings

from udavi.numerics import make_rng
from udavi.schedule import linear_schedule

settings.register_profile("repo", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("repo")


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture(scope="session")
def sched400():
    return linear_schedule(400, 1e-4, 0.02)


def pytest_configure(config):
    config._acceptance_lines = []


@pytest.fixture
def criterion(request, capsys):
    """Record (and print) the one-line verdict of an acceptance criterion."""

    def report(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config._acceptance_lines.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
