import numpy as np
import pytest

from lossbench.graph import Graph


def ring_graph(n, extra=4, seed=0, d_in=3, classes=2):
    """Cycle on n nodes plus a few random chords."""
    r = np.random.default_rng(seed)
    edges = [(i, (i + 1) % n) for i in range(n)]
    edges += [tuple(r.choice(n, 2, replace=False)) for _ in range(extra)]
    return Graph.from_edges(n, edges, r.normal(size=(n, d_in)), r.integers(0, classes, n))


def two_cliques(size=6, d_in=4, bridge=False):
    edges = []
    for base in (0, size):
        edges += [(base + i, base + j) for i in range(size) for j in range(i + 1, size)]
    if bridge:
        edges.append((size - 1, size))
    labels = np.r_[np.zeros(size, int), np.ones(size, int)]
    X = np.random.default_rng(1).normal(size=(2 * size, d_in))
    return Graph.from_edges(2 * size, edges, X, labels)


@pytest.fixture
def g8():
    return ring_graph(8, seed=1)


@pytest.fixture
def cliques():
    return two_cliques()


ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
