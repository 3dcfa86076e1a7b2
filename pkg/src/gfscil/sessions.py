"""Session data containers and the trainer-facing view enforcing the inductive contract."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import SparseGraph


@dataclass(frozen=True)
class SessionDataset:
    """One session's disjoint subgraph with its node roles.

    For the base session `support` holds the train nodes and `query` the
    held-out test nodes; for incremental sessions `support` holds the K
    labeled nodes per class and `query` the evaluation nodes, with
    `val_query` withheld for hyperparameter sweeps only.
    """

    t: int
    graph: SparseGraph
    features: np.ndarray
    labels: np.ndarray  # global class id per local node
    classes: tuple[int, ...]
    support: np.ndarray  # local node ids
    query: np.ndarray
    val_query: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    node_map: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    @property
    def n(self) -> int:
        return self.graph.n


class RetiredSessionError(RuntimeError):
    """Raised when training code touches a session whose window has closed."""


class TrainView:
    """What the trainer is allowed to see of one incremental session.

    Exposes the session graph, features, labeled support nodes, and the
    *unlabeled* query node ids (for calibration). Query labels are never
    reachable, and every accessor fails once the session is retired, so
    the inductive constraint is enforced by interface.
    """

    def __init__(self, dataset: SessionDataset):
        self._dataset = dataset
        self._retired = False

    def _check(self) -> SessionDataset:
        if self._retired:
            raise RetiredSessionError(
                f"session {self._dataset.t} data accessed after its training window closed"
            )
        return self._dataset

    @property
    def t(self) -> int:
        return self._check().t

    @property
    def graph(self) -> SparseGraph:
        return self._check().graph

    @property
    def features(self) -> np.ndarray:
        return self._check().features

    @property
    def classes(self) -> tuple[int, ...]:
        return self._check().classes

    @property
    def support_nodes(self) -> np.ndarray:
        return self._check().support

    @property
    def support_labels(self) -> np.ndarray:
        ds = self._check()
        return ds.labels[ds.support]

    @property
    def query_nodes(self) -> np.ndarray:
        """Unlabeled calibration nodes; their labels are not exposed here."""
        return self._check().query

    @property
    def retired(self) -> bool:
        return self._retired

    def retire(self) -> None:
        self._retired = True
