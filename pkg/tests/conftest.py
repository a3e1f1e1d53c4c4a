import numpy as np
import pytest

from gnnse.grid_model import Branch, Bus, NetworkCase, bundled_case


@pytest.fixture(scope="session")
def case118():
    return bundled_case("case118")


@pytest.fixture
def two_bus():
    """Slack 1.0 pu at 0 deg feeding a no-load PQ bus through x = 0.1 pu."""
    return NetworkCase(100.0, [Bus(1, "slack", v_setpoint=1.0), Bus(2, "pq")],
                       [Branch(1, 2, 0.0, 0.1)], name="two_bus")


def random_case(rng, n=5, extra_edges=3):
    """Small connected case: random spanning tree plus a few extra branches."""
    buses = [Bus(1, "slack", v_setpoint=1.02)]
    for i in range(2, n + 1):
        kind = "pv" if i == 2 else "pq"
        buses.append(Bus(i, kind, p_load=rng.uniform(10, 40), q_load=rng.uniform(2, 15),
                         bs=rng.uniform(0, 5), v_setpoint=1.01, p_gen=30.0 if kind == "pv" else 0.0))
    branches = []
    for i in range(2, n + 1):
        j = int(rng.integers(1, i))
        branches.append(Branch(j, i, rng.uniform(0.01, 0.05), rng.uniform(0.05, 0.2),
                               rng.uniform(0.0, 0.05)))
    for _ in range(extra_edges):
        a, b = rng.choice(np.arange(1, n + 1), 2, replace=False)
        branches.append(Branch(int(a), int(b), rng.uniform(0.01, 0.05), rng.uniform(0.05, 0.2),
                               rng.uniform(0.0, 0.05), tap=rng.choice([1.0, 0.97])))
    return NetworkCase(100.0, buses, branches, name="random")


def random_graph(rng, n, p):
    adj = np.triu(rng.random((n, n)) < p, 1)
    return (adj | adj.T).astype(int)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
