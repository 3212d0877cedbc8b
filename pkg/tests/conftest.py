from __future__ import annotations

import numpy as np
import pytest

from mortshock.data import build_panel
from mortshock.synthetic import make_fixture


@pytest.fixture(scope="session")
def fixture_panel():
    series, entry, truth = make_fixture(seed=0)
    ages, years = truth.ages, truth.years
    panel = build_panel(series, entry, (int(ages[0]), int(ages[-1])), (int(years[0]), int(years[-1])))
    return panel, truth


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL (or SKIP) line for an acceptance criterion, then assert it."""
    lines = request.config.stash.setdefault(_ACCEPTANCE_KEY, [])

    def record(label: str, ok: bool, detail: str = "") -> None:
        line = f"{'PASS' if ok else 'FAIL'} {label}" + (f": {detail}" if detail else "")
        lines.append(line)
        print(line)
        assert ok, line

    def skip(label: str, reason: str) -> None:
        lines.append(f"SKIP {label}: {reason}")
        pytest.skip(reason)

    record.skip = skip
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
