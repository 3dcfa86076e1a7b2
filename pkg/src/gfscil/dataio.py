"""On-disk formats: edge lists, label files, dense feature matrices, split archives."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .graph import SparseGraph
from .sessions import SessionDataset

FEATURE_MAGIC_HEADER = 8  # two little-endian uint32 counts: n, d


def read_edge_list(path) -> np.ndarray:
    """Text edge list: one `src,dst` pair of 0-based ids per line, `#` comments."""
    edges = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected `src,dst`, got {line!r}")
            edges.append((int(parts[0]), int(parts[1])))
    return np.asarray(edges, dtype=np.int64).reshape(-1, 2)


def read_labels(path, n: int) -> np.ndarray:
    """Label file: one `node_id,label` per line; unlisted nodes stay unlabeled (-1)."""
    labels = np.full(n, -1, dtype=np.int64)
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected `node_id,label`, got {line!r}")
            node, label = int(parts[0]), int(parts[1])
            if not 0 <= node < n:
                raise ValueError(f"{path}:{lineno}: node id {node} out of range [0, {n})")
            labels[node] = label
    return labels


def write_features_bin(path, features: np.ndarray) -> None:
    """Raw little-endian float32 matrix behind an 8-byte (n, d) uint32 header."""
    n, d = features.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", n, d))
        fh.write(np.ascontiguousarray(features, dtype="<f4").tobytes())


def read_features_bin(path) -> np.ndarray:
    with open(path, "rb") as fh:
        n, d = struct.unpack("<II", fh.read(FEATURE_MAGIC_HEADER))
        data = np.frombuffer(fh.read(n * d * 4), dtype="<f4", count=n * d)
    return data.reshape(n, d).astype(np.float64)


def read_features_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)


def read_features(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".csv":
        return read_features_csv(path)
    return read_features_bin(path)


def save_sessions(directory, sessions: list[SessionDataset], meta: dict) -> None:
    """Persist split sessions as one npz per session plus a JSON manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = dict(meta)
    manifest["sessions"] = len(sessions)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    for ds in sessions:
        np.savez(
            directory / f"session_{ds.t}.npz",
            row_offsets=ds.graph.row_offsets,
            col_indices=ds.graph.col_indices,
            features=ds.features,
            labels=ds.labels,
            classes=np.asarray(ds.classes, dtype=np.int64),
            support=ds.support,
            query=ds.query,
            val_query=ds.val_query,
            node_map=ds.node_map,
        )


def load_sessions(directory) -> tuple[list[SessionDataset], dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    sessions = []
    for t in range(manifest["sessions"]):
        with np.load(directory / f"session_{t}.npz") as z:
            graph = SparseGraph(
                n=int(z["row_offsets"].shape[0] - 1),
                row_offsets=z["row_offsets"],
                col_indices=z["col_indices"],
            )
            sessions.append(
                SessionDataset(
                    t=t,
                    graph=graph,
                    features=z["features"],
                    labels=z["labels"],
                    classes=tuple(int(c) for c in z["classes"]),
                    support=z["support"],
                    query=z["query"],
                    val_query=z["val_query"],
                    node_map=z["node_map"],
                )
            )
    return sessions, manifest
