import numpy as np
import pytest

from gridshed.dynamics_sim import load_contingencies
from gridshed.grid_model import Bus, Generator, Line, Load, Network, load_case
from gridshed.scenario_lab import generate_dataset, split_dataset


def make_network(n_bus, edges, x=0.1, r=0.0, loads=(), gens=None, kinds=None):
    """Small hand-built network; bus 0 is the slack unless ``kinds`` says otherwise."""
    kinds = kinds or ["slack"] + ["load-only"] * (n_bus - 1)
    buses = [Bus(i, k) for i, k in enumerate(kinds)]
    lines = [Line(i, j, r, x) for i, j in edges]
    gens = gens if gens is not None else [Generator(0, 5.0, 5.0, 0.0, 0.2)]
    return Network(buses, lines, gens, [Load(b, p, q) for b, p, q in loads])


@pytest.fixture(scope="session")
def case9():
    return load_case("case9")


@pytest.fixture(scope="session")
def conts9():
    return load_contingencies("case9_contingencies")


@pytest.fixture(scope="session")
def small_ds(case9, conts9):
    """60 labelled 9-bus points, split with seed 0."""
    ds = generate_dataset(case9, conts9, 60, rng_seed=11)
    return split_dataset(ds, rng_seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
