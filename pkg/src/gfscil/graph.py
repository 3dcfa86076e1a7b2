"""Symmetric CSR graphs and the topology surgery used by session splitting and augmentation.

Graphs are undirected, stored as both directions in CSR form, carry a
self-loop on every node, and are immutable after construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

# Sentinel for nodes without a class assignment.
UNLABELED = -1


@dataclass(frozen=True)
class SparseGraph:
    """Immutable symmetric adjacency in CSR form with self-loops.

    Invariants: (u, v) present iff (v, u) present; every node has a
    self-loop; neighbor lists strictly sorted with no duplicates.
    """

    n: int
    row_offsets: np.ndarray
    col_indices: np.ndarray

    def __post_init__(self) -> None:
        self.row_offsets.setflags(write=False)
        self.col_indices.setflags(write=False)

    @property
    def num_entries(self) -> int:
        """Directed CSR entries, self-loops included."""
        return int(self.col_indices.shape[0])

    @cached_property
    def degrees(self) -> np.ndarray:
        return np.diff(self.row_offsets)

    @cached_property
    def entry_rows(self) -> np.ndarray:
        """Row (destination) id of every CSR entry; entry j is the edge col_indices[j] -> entry_rows[j]."""
        return np.repeat(np.arange(self.n, dtype=np.int64), self.degrees)

    def neighbors(self, u: int) -> np.ndarray:
        return self.col_indices[self.row_offsets[u] : self.row_offsets[u + 1]]

    def undirected_edges(self) -> np.ndarray:
        """(m, 2) array of non-self-loop edges with u < v."""
        rows = self.entry_rows
        keep = rows < self.col_indices
        return np.stack([rows[keep], self.col_indices[keep]], axis=1)

    @property
    def undirected_edge_count(self) -> int:
        """Non-self-loop undirected edge count."""
        return int(np.count_nonzero(self.entry_rows < self.col_indices))

    def has_edge(self, u: int, v: int) -> bool:
        return bool(np.isin(v, self.neighbors(u)))

    def validate(self) -> None:
        """Assert all structural invariants; used by tests and loaders."""
        off, col = self.row_offsets, self.col_indices
        if off.shape != (self.n + 1,) or off[0] != 0 or off[-1] != col.shape[0]:
            raise ValueError("row_offsets inconsistent with col_indices")
        if np.any(np.diff(off) < 0):
            raise ValueError("row_offsets not monotone")
        if col.size and (col.min() < 0 or col.max() >= self.n):
            raise ValueError("column index out of range")
        for u in range(self.n):
            nb = self.neighbors(u)
            if np.any(np.diff(nb) <= 0):
                raise ValueError(f"neighbor list of node {u} not strictly sorted")
            if u not in nb:
                raise ValueError(f"node {u} missing its self-loop")
        # symmetry
        rows = self.entry_rows
        fwd = set(map(tuple, np.stack([rows, col], axis=1).tolist()))
        if any((v, u) not in fwd for u, v in fwd):
            raise ValueError("adjacency not symmetric")


def _from_pair_codes(codes: np.ndarray, n: int) -> SparseGraph:
    """Build a SparseGraph from deduplicated, sorted u*n+v codes covering both directions and self-loops."""
    rows = codes // n
    cols = codes % n
    counts = np.bincount(rows, minlength=n)
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return SparseGraph(n=n, row_offsets=offsets, col_indices=cols.astype(np.int64))


def build_graph(edges, n: int) -> SparseGraph:
    """Symmetrize, deduplicate, and add self-loops to an edge list.

    `edges` is any (m, 2) array-like of node-id pairs; self-loops and
    duplicates in the input are tolerated.
    """
    if n < 0:
        raise ValueError("node count must be non-negative")
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if e.size and (e.min() < 0 or e.max() >= n):
        raise ValueError(f"edge endpoint out of range [0, {n})")
    loops = np.arange(n, dtype=np.int64)
    src = np.concatenate([e[:, 0], e[:, 1], loops])
    dst = np.concatenate([e[:, 1], e[:, 0], loops])
    codes = np.unique(src * n + dst) if n > 0 else np.empty(0, dtype=np.int64)
    return _from_pair_codes(codes, n)


def identity_adjacency(n: int) -> SparseGraph:
    """Graph whose only edges are the self-loops."""
    if n < 1:
        raise ValueError("identity adjacency needs at least one node")
    return SparseGraph(
        n=n,
        row_offsets=np.arange(n + 1, dtype=np.int64),
        col_indices=np.arange(n, dtype=np.int64),
    )


def sever_to_class_subset(g: SparseGraph, labels: np.ndarray, subset) -> SparseGraph:
    """Keep exactly the edges whose both endpoints are labeled inside `subset`.

    Self-loops always survive; the node set is unchanged, so nodes
    outside the subset become isolated (self-loop only).
    """
    labels = np.asarray(labels)
    member = np.zeros(g.n, dtype=bool)
    subset = np.asarray(sorted(subset), dtype=labels.dtype if labels.size else np.int64)
    if subset.size:
        member = np.isin(labels, subset)
    rows = g.entry_rows
    cols = g.col_indices
    keep = (rows == cols) | (member[rows] & member[cols])
    codes = rows[keep] * g.n + cols[keep]  # already sorted: keep preserves order
    return _from_pair_codes(codes, g.n)


def inject_link_noise(g: SparseGraph, rate: float, rng: np.random.Generator) -> SparseGraph:
    """Add floor(rate * |E|) new undirected edges between currently non-isolated nodes.

    New edges are sampled uniformly without replacement from the absent
    pairs; if fewer absent pairs exist than requested, all are added.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError("noise rate must lie in [0, 1]")
    existing = g.undirected_edges()
    want = int(rate * existing.shape[0])
    if want == 0:
        return g
    non_isolated = np.flatnonzero(g.degrees > 1)  # degree counts the self-loop
    k = non_isolated.size
    pool_size = k * (k - 1) // 2 - existing.shape[0]
    if pool_size <= 0:
        return g
    want = min(want, pool_size)

    existing_codes = existing[:, 0] * g.n + existing[:, 1]
    if k * (k - 1) // 2 <= 2_000_000:
        iu, ju = np.triu_indices(k, k=1)
        cand = non_isolated[iu] * g.n + non_isolated[ju]
        cand = np.setdiff1d(cand, existing_codes, assume_unique=False)
        picked = rng.choice(cand, size=want, replace=False)
    else:
        # Rejection sampling; pool is far larger than the request at this size.
        taken: set[int] = set(existing_codes.tolist())
        picked_list: list[int] = []
        while len(picked_list) < want:
            u, v = rng.choice(non_isolated, size=2, replace=False)
            if u > v:
                u, v = v, u
            code = int(u) * g.n + int(v)
            if code not in taken:
                taken.add(code)
                picked_list.append(code)
        picked = np.asarray(picked_list, dtype=np.int64)

    new_edges = np.stack([picked // g.n, picked % g.n], axis=1)
    return build_graph(np.concatenate([existing, new_edges], axis=0), g.n)


@dataclass(frozen=True)
class SessionSplit:
    """Per-session induced subgraphs with dense reindexing."""

    graphs: list[SparseGraph]
    node_maps: list[np.ndarray]  # local id -> original id
    dropped: np.ndarray  # original ids whose label is in no session


def restrict_to_sessions(g: SparseGraph, labels: np.ndarray, session_classes: list) -> SessionSplit:
    """Cut the graph into one induced, densely reindexed subgraph per session.

    Only intra-session edges survive; nodes whose label appears in no
    session class set are excluded and reported.
    """
    labels = np.asarray(labels)
    seen: set[int] = set()
    for cs in session_classes:
        cs = set(int(c) for c in cs)
        if cs & seen:
            raise ValueError("session class sets must be pairwise disjoint")
        seen |= cs

    graphs: list[SparseGraph] = []
    node_maps: list[np.ndarray] = []
    assigned = np.zeros(g.n, dtype=bool)
    for cs in session_classes:
        member = np.isin(labels, np.asarray(sorted(cs)))
        nodes = np.flatnonzero(member)
        assigned |= member
        local = np.full(g.n, -1, dtype=np.int64)
        local[nodes] = np.arange(nodes.size)
        edges = g.undirected_edges()
        keep = member[edges[:, 0]] & member[edges[:, 1]]
        sub_edges = local[edges[keep]]
        graphs.append(build_graph(sub_edges, nodes.size))
        node_maps.append(nodes)
    return SessionSplit(graphs=graphs, node_maps=node_maps, dropped=np.flatnonzero(~assigned))
