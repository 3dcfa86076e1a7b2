import sys
from pathlib import Path

import numpy as np
import pytest

# make the sibling oracle helpers importable regardless of invocation dir
sys.path.insert(0, str(Path(__file__).parent))

from gfscil.graph import build_graph


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


@pytest.fixture
def path_graph():
    """0 - 1 - 2 path."""
    return build_graph([(0, 1), (1, 2)], 3)


@pytest.fixture
def star_graph():
    """Node 0 connected to 1, 2, 3."""
    return build_graph([(0, 1), (0, 2), (0, 3)], 4)


def random_graph(rng, n, p=0.4):
    pairs = [(u, v) for u in range(n) for v in range(u + 1, n) if rng.random() < p]
    return build_graph(pairs, n)


def toy_session(rng, classes=3, nodes_per_class=6, dim=5, t=0, k_support=4, class_offset=0):
    """Small separable SBM session for trainer tests."""
    from gfscil.harness import synth_sbm
    from gfscil.sessions import SessionDataset

    dim = max(dim, classes)
    graph, features, labels = synth_sbm(classes, nodes_per_class, 0.6, 0.05, dim, 0.3, rng)
    labels = labels + class_offset
    support, query = [], []
    for c in range(class_offset, class_offset + classes):
        members = rng.permutation(np.flatnonzero(labels == c))
        support.extend(members[:k_support].tolist())
        query.extend(members[k_support:].tolist())
    return SessionDataset(
        t=t,
        graph=graph,
        features=features,
        labels=labels,
        classes=tuple(range(class_offset, class_offset + classes)),
        support=np.sort(np.asarray(support, dtype=np.int64)),
        query=np.sort(np.asarray(query, dtype=np.int64)),
        val_query=np.empty(0, dtype=np.int64),
        node_map=np.arange(classes * nodes_per_class, dtype=np.int64),
    )
