import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from certainty_planner.eikonal import reachable_set, source_neighborhood  # noqa: E402
from certainty_planner.scenarios import paper_main_scenario  # noqa: E402


@pytest.fixture(scope="session")
def main():
    return paper_main_scenario()


@pytest.fixture(scope="session")
def main_reach(main):
    return reachable_set(main.start_solution, 0.4)


@pytest.fixture(scope="session")
def coarse_main():
    return paper_main_scenario(n=61)


def fixed_boundary(sol, radius=None):
    """Boundary data of a stationary solve, rebuilt for the sweeping oracle."""
    from certainty_planner import eikonal

    spec = sol.spec
    radius = eikonal.SOURCE_RADIUS if radius is None else radius
    inside = sol.mask.inside
    rate = np.where(inside, sol.cost.values / np.where(inside, sol.speed.values, 1.0), np.inf)
    fixed = np.zeros(spec.shape, dtype=bool)
    vals = np.zeros(spec.shape)
    for ij in sol.sources:
        if radius > 0:
            idx, v = source_neighborhood(spec, rate, ij, radius)
        else:
            idx, v = np.array([spec.linear_index(*ij)]), np.zeros(1)
        flat_f, flat_v = fixed.ravel(), vals.ravel()
        new = ~flat_f[idx] | (v < flat_v[idx])
        flat_v[idx[new]] = v[new]
        flat_f[idx] = True
    return fixed, vals


def sweep_like(sol, radius=None):
    from oracles import sweep_eikonal

    inside = sol.mask.inside
    fixed, vals = fixed_boundary(sol, radius)
    return sweep_eikonal(np.where(inside, sol.speed.values, 1.0), np.where(inside, sol.cost.values, 1.0),
                         inside, fixed, vals, sol.spec.h)


_ACCEPTANCE: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
