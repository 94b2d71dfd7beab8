import sys
from pathlib import Path

import numpy as np
import pytest

# make the test-only oracles importable as a plain module
sys.path.insert(0, str(Path(__file__).parent))

from coopwind.hierarchy import Hierarchy, ScenarioPanel  # noqa: E402
from coopwind.market import PriceTriple  # noqa: E402


@pytest.fixture
def prices():
    return PriceTriple(25.0, 4.0, 12.0)


@pytest.fixture
def two_farms():
    return Hierarchy(("wpp1", "wpp2"), (20.0, 30.0))


def random_panel(h, n_days=3, n_leads=2, n_scen=5, seed=0, coherent_obs=True):
    rng = np.random.default_rng(seed)
    caps = h.bottom_capacities
    bottom = rng.uniform(0, 1, (n_days, n_leads, n_scen, h.m)) * caps
    agg = bottom.sum(axis=-1, keepdims=True) * rng.uniform(0.8, 1.0, (n_days, n_leads, n_scen, 1))
    data = np.concatenate([agg, bottom], axis=-1)
    ob = rng.uniform(0, 1, (n_days, n_leads, h.m)) * caps
    obs = np.concatenate([ob.sum(axis=-1, keepdims=True), ob], axis=-1)
    times = [f"2020-01-{d + 1:02d}" for d in range(n_days)]
    return ScenarioPanel(h, times, data, obs, tuple(range(1, n_leads + 1)))


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
