import numpy as np
import pytest

from secgfd.graph import build_graph


def random_graph(rng, n, p=0.2, connected=False):
    """Erdos-Renyi edge set; optionally threaded with a path so it is connected."""
    upper = np.triu(rng.random((n, n)) < p, 1)
    if connected:
        upper[np.arange(n - 1), np.arange(1, n)] = True
    rows, cols = np.nonzero(upper)
    return build_graph(np.stack([rows, cols], axis=1), n)


def dense_adjacency(g):
    A = np.zeros((g.num_nodes, g.num_nodes))
    for v in range(g.num_nodes):
        A[v, g.neighbors(v)] = 1.0
    return A


def path_graph(n):
    return build_graph([(i, i + 1) for i in range(n - 1)], n)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
