import numpy as np
import pytest

from fdigame.network import EdgeAttr, GreParams, RoadNetwork, Scenario, TripTable, gre_scenario


def path_net(n=3, f=2.0, c=10.0, b=0.15, p=4.0):
    """Nodes 1..n joined by the directed path 1 -> 2 -> ... -> n."""
    edges = tuple((i, i + 1, EdgeAttr(f, c, b, p)) for i in range(1, n))
    return RoadNetwork(tuple(range(1, n + 1)), edges)


def random_strong_net(rng, n=5, extra=4):
    """Random strongly connected network: a directed ring plus random chords."""
    if extra > n * (n - 2):
        raise ValueError(f"a {n}-node ring has room for at most {n * (n - 2)} chords")
    pairs = {(i, i % n + 1) for i in range(1, n + 1)}
    while len(pairs) < n + extra:
        u, v = rng.integers(1, n + 1, 2)
        if u != v:
            pairs.add((int(u), int(v)))
    edges = tuple((u, v, EdgeAttr(float(rng.uniform(1, 5)), float(rng.uniform(2, 20)), 0.15, 4.0))
                  for u, v in sorted(pairs))
    return RoadNetwork(tuple(range(1, n + 1)), edges)


def random_trips(rng, net, k=4):
    trips = []
    for _ in range(k):
        o, d = rng.choice(net.nodes, 2, replace=False)
        trips.append((int(o), int(d), float(rng.uniform(0.5, 5))))
    return TripTable(tuple(trips))


@pytest.fixture(scope="session")
def gre32() -> Scenario:
    return gre_scenario(GreParams(3, 2, seed=20))


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
