import numpy as np
import pytest

from apgcn.graph import build_graph


def ring_graph(n, d_features=3, n_classes=2, dtype=np.float64, seed=0):
    """k-regular ring: every row of the normalized operator sums to 1."""
    rng = np.random.default_rng(seed)
    edges = [(i, (i + 1) % n) for i in range(n)]
    feats = rng.random((n, d_features)).astype(dtype)
    labels = rng.integers(0, n_classes, size=n)
    return build_graph(edges, feats, labels, n_classes=n_classes)


def random_graph(n, p=0.15, d_features=4, n_classes=3, seed=0, dtype=np.float64):
    """Erdos-Renyi bundle; may be disconnected."""
    rng = np.random.default_rng(seed)
    u = rng.random((n, n))
    src, dst = np.nonzero(np.triu(u < p, k=1))
    feats = rng.random((n, d_features)).astype(dtype)
    labels = rng.integers(0, n_classes, size=n)
    return build_graph(list(zip(src.tolist(), dst.tolist())), feats, labels,
                       n_classes=n_classes)


def dense_adjacency(g):
    a = np.zeros((g.n_nodes, g.n_nodes))
    a[g.arc_sources(), g.csr_targets] = 1.0
    return a


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
