import math

import numpy as np
import pytest

from fdepr.resonator_mode import ResonatorParams

TWO_PI = 2 * math.pi
KAPPA_C = 8.2e5
KAPPA_I = 6.3e5
KAPPA = KAPPA_C + KAPPA_I


@pytest.fixture
def resonator():
    return ResonatorParams(TWO_PI * 6.999e9, KAPPA_C, KAPPA_I)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    lines = request.config.stash.setdefault(_VERDICTS, [])

    def record(label: str, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'}  {label}: {detail}"
        lines.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
