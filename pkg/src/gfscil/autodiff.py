"""Reverse-mode automatic differentiation over dense float64 arrays.

A Tape records primitive operations as they execute; `backward` replays
the records in reverse with a fixed, sequential accumulation order so
gradients are bit-reproducible. The primitive set is exactly what a
multi-head graph-attention encoder and a cosine-margin loss need, plus a
central finite-difference oracle for testing.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .graph import SparseGraph


class ParamStore:
    """Named parameter tensors with a stable iteration order and fixed shapes."""

    def __init__(self, items: dict[str, np.ndarray] | None = None):
        self._data: dict[str, np.ndarray] = {}
        if items:
            for name, value in items.items():
                self.add(name, value)

    def add(self, name: str, value) -> None:
        if name in self._data:
            raise ValueError(f"duplicate parameter name {name!r}")
        self._data[name] = np.asarray(value, dtype=np.float64)

    def replace(self, name: str, value) -> None:
        value = np.asarray(value, dtype=np.float64)
        if self._data[name].shape != value.shape:
            raise ValueError(f"shape change for parameter {name!r}")
        self._data[name] = value

    def __getitem__(self, name: str) -> np.ndarray:
        return self._data[name]

    def __contains__(self, name: str) -> bool:
        return name in self._data

    def __len__(self) -> int:
        return len(self._data)

    def names(self) -> list[str]:
        return list(self._data)

    def items(self):
        return self._data.items()

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, value in self._data.items():
            out.add(name, value.copy())
        return out

    def same_layout(self, other: "ParamStore") -> bool:
        return self.names() == other.names() and all(
            self._data[k].shape == other._data[k].shape for k in self._data
        )


def _seg_sum(values: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    # Every row holds at least the self-loop, so reduceat segments are non-empty.
    return np.add.reduceat(values, offsets[:-1], axis=0)


def _seg_max(values: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    return np.maximum.reduceat(values, offsets[:-1])


class Tape:
    """Append-only record of primitives; node values are float64 ndarrays.

    Methods return integer node ids. Constants never receive adjoints;
    parameters are registered once per name and shared across all uses
    on the same tape.
    """

    def __init__(self):
        self._values: list[np.ndarray] = []
        self._needs_grad: list[bool] = []
        self._records: list[tuple] = []  # (op, input ids, output id, aux)
        self._param_nodes: dict[str, int] = {}

    # -- node management -------------------------------------------------

    def _push(self, value: np.ndarray, needs_grad: bool) -> int:
        self._values.append(value)
        self._needs_grad.append(needs_grad)
        return len(self._values) - 1

    def _record(self, op: str, inputs: tuple[int, ...], value: np.ndarray, aux=None) -> int:
        needs = any(self._needs_grad[i] for i in inputs)
        out = self._push(value, needs)
        if needs:
            self._records.append((op, inputs, out, aux))
        return out

    def constant(self, value) -> int:
        return self._push(np.asarray(value, dtype=np.float64), needs_grad=False)

    def param(self, name: str, value: np.ndarray) -> int:
        """Leaf tensor tracked by name; repeated registration returns the same node."""
        if name in self._param_nodes:
            return self._param_nodes[name]
        node = self._push(np.asarray(value, dtype=np.float64), needs_grad=True)
        self._param_nodes[name] = node
        return node

    def value(self, node: int) -> np.ndarray:
        return self._values[node]

    # -- primitives ------------------------------------------------------

    def matmul(self, a: int, b: int) -> int:
        return self._record("matmul", (a, b), self._values[a] @ self._values[b])

    def add(self, a: int, b: int) -> int:
        return self._record("add", (a, b), self._values[a] + self._values[b])

    def sub(self, a: int, b: int) -> int:
        return self._record("sub", (a, b), self._values[a] - self._values[b])

    def mul(self, a: int, b: int) -> int:
        return self._record("mul", (a, b), self._values[a] * self._values[b])

    def scale(self, a: int, c: float) -> int:
        return self._record("scale", (a,), self._values[a] * c, aux=c)

    def add_bias(self, a: int, bias: int) -> int:
        return self._record("add_bias", (a, bias), self._values[a] + self._values[bias][None, :])

    def leaky_relu(self, a: int, slope: float = 0.2) -> int:
        x = self._values[a]
        return self._record("leaky_relu", (a,), np.where(x > 0, x, slope * x), aux=slope)

    def relu(self, a: int) -> int:
        return self._record("relu", (a,), np.maximum(self._values[a], 0.0))

    def exp(self, a: int) -> int:
        return self._record("exp", (a,), np.exp(self._values[a]))

    def log(self, a: int) -> int:
        return self._record("log", (a,), np.log(self._values[a]))

    def row_l2_normalize(self, a: int) -> int:
        """Rows scaled to unit L2 norm; all-zero rows stay zero."""
        x = self._values[a]
        norms = np.linalg.norm(x, axis=-1, keepdims=True)
        safe = np.where(norms == 0.0, 1.0, norms)
        return self._record("row_l2_normalize", (a,), x / safe, aux=safe)

    def concat_cols(self, nodes: list[int]) -> int:
        widths = [self._values[i].shape[1] for i in nodes]
        value = np.concatenate([self._values[i] for i in nodes], axis=1)
        return self._record("concat_cols", tuple(nodes), value, aux=widths)

    def mean_stack(self, nodes: list[int]) -> int:
        value = sum(self._values[i] for i in nodes) / len(nodes)
        return self._record("mean_stack", tuple(nodes), value, aux=len(nodes))

    def dropout(self, a: int, mask: np.ndarray, keep_prob: float) -> int:
        """Externally supplied binary mask with inverted scaling."""
        scaled = mask.astype(np.float64) / keep_prob
        return self._record("dropout", (a,), self._values[a] * scaled, aux=scaled)

    def gather_rows(self, a: int, index: np.ndarray) -> int:
        return self._record("gather_rows", (a,), self._values[a][index], aux=np.asarray(index))

    def row_sum(self, a: int) -> int:
        return self._record("row_sum", (a,), self._values[a].sum(axis=1), aux=self._values[a].shape)

    def sum_all(self, a: int) -> int:
        return self._record("sum_all", (a,), np.asarray(self._values[a].sum()), aux=self._values[a].shape)

    def mean_all(self, a: int) -> int:
        x = self._values[a]
        return self._record("mean_all", (a,), np.asarray(x.mean()), aux=(x.shape, x.size))

    def transpose(self, a: int) -> int:
        return self._record("transpose", (a,), self._values[a].T)

    def edge_logits(self, src_scores: int, dst_scores: int, g: SparseGraph) -> int:
        """Per-CSR-entry sum src[row] + dst[col]; entry j carries the edge col[j] -> row[j]."""
        value = self._values[src_scores][g.entry_rows] + self._values[dst_scores][g.col_indices]
        return self._record("edge_logits", (src_scores, dst_scores), value, aux=g)

    def segment_softmax(self, e: int, g: SparseGraph) -> int:
        """Softmax over each destination node's incoming CSR entries, max-shifted for stability."""
        values = self._values[e]
        if values.shape != (g.num_entries,):
            raise ValueError("segment_softmax expects one value per CSR entry")
        shifted = values - _seg_max(values, g.row_offsets)[g.entry_rows]
        w = np.exp(shifted)
        alpha = w / _seg_sum(w, g.row_offsets)[g.entry_rows]
        return self._record("segment_softmax", (e,), alpha, aux=g)

    def segment_weighted_sum(self, alpha: int, h: int, g: SparseGraph) -> int:
        """out[u] = sum over CSR entries j of row u of alpha[j] * h[col[j]]."""
        a = self._values[alpha]
        feats = self._values[h]
        value = _seg_sum(a[:, None] * feats[g.col_indices], g.row_offsets)
        return self._record("segment_weighted_sum", (alpha, h), value, aux=g)

    # -- differentiation -------------------------------------------------

    def backward(self, loss: int) -> dict[str, np.ndarray]:
        """Adjoints of every registered parameter; zeros if unreachable from `loss`."""
        if self._values[loss].ndim != 0:
            raise ValueError("backward requires a scalar loss node")
        adj: list[np.ndarray | None] = [None] * len(self._values)
        adj[loss] = np.ones((), dtype=np.float64)
        for op, inputs, out, aux in reversed(self._records):
            g = adj[out]
            if g is None:
                continue
            for node, contrib in _ADJOINTS[op](g, self, inputs, out, aux):
                if not self._needs_grad[node]:
                    continue
                adj[node] = contrib if adj[node] is None else adj[node] + contrib
        grads: dict[str, np.ndarray] = {}
        for name, node in self._param_nodes.items():
            a = adj[node]
            grads[name] = np.zeros_like(self._values[node]) if a is None else a
        return grads


# Adjoint rules: (upstream grad, tape, input ids, output id, aux) -> [(input id, contribution)].
# Contributions are only consumed for inputs with needs_grad set.


def _adj_matmul(g, tape, inputs, out, aux):
    a, b = inputs
    av, bv = tape._values[a], tape._values[b]
    results = []
    if tape._needs_grad[a]:
        results.append((a, np.outer(g, bv) if bv.ndim == 1 else g @ bv.T))
    if tape._needs_grad[b]:
        results.append((b, av.T @ g))
    return results


def _adj_row_l2_normalize(g, tape, inputs, out, aux):
    y = tape._values[out]
    dot = np.sum(y * g, axis=-1, keepdims=True)
    return [(inputs[0], (g - y * dot) / aux)]


def _adj_gather_rows(g, tape, inputs, out, aux):
    dx = np.zeros_like(tape._values[inputs[0]])
    np.add.at(dx, aux, g)
    return [(inputs[0], dx)]


def _adj_edge_logits(g, tape, inputs, out, aux):
    src, dst = inputs
    graph: SparseGraph = aux
    results = []
    if tape._needs_grad[src]:
        results.append((src, _seg_sum(g, graph.row_offsets)))
    if tape._needs_grad[dst]:
        results.append((dst, np.bincount(graph.col_indices, weights=g, minlength=graph.n)))
    return results


def _adj_segment_softmax(g, tape, inputs, out, aux):
    graph: SparseGraph = aux
    alpha = tape._values[out]
    proj = _seg_sum(alpha * g, graph.row_offsets)[graph.entry_rows]
    return [(inputs[0], alpha * (g - proj))]


def _adj_segment_weighted_sum(g, tape, inputs, out, aux):
    alpha_id, h_id = inputs
    graph: SparseGraph = aux
    alpha = tape._values[alpha_id]
    feats = tape._values[h_id]
    g_rows = g[graph.entry_rows]
    results = []
    if tape._needs_grad[alpha_id]:
        results.append((alpha_id, np.sum(g_rows * feats[graph.col_indices], axis=1)))
    if tape._needs_grad[h_id]:
        dh = np.zeros_like(feats)
        np.add.at(dh, graph.col_indices, alpha[:, None] * g_rows)
        results.append((h_id, dh))
    return results


_ADJOINTS: dict[str, Callable] = {
    "matmul": _adj_matmul,
    "add": lambda g, t, inp, out, aux: [(inp[0], g), (inp[1], g)],
    "sub": lambda g, t, inp, out, aux: [(inp[0], g), (inp[1], -g)],
    "mul": lambda g, t, inp, out, aux: [
        (inp[0], g * t._values[inp[1]]),
        (inp[1], g * t._values[inp[0]]),
    ],
    "scale": lambda g, t, inp, out, aux: [(inp[0], g * aux)],
    "add_bias": lambda g, t, inp, out, aux: [(inp[0], g), (inp[1], g.sum(axis=0))],
    "leaky_relu": lambda g, t, inp, out, aux: [
        (inp[0], g * np.where(t._values[inp[0]] > 0, 1.0, aux))
    ],
    "relu": lambda g, t, inp, out, aux: [(inp[0], g * (t._values[inp[0]] > 0))],
    "exp": lambda g, t, inp, out, aux: [(inp[0], g * t._values[out])],
    "log": lambda g, t, inp, out, aux: [(inp[0], g / t._values[inp[0]])],
    "row_l2_normalize": _adj_row_l2_normalize,
    "concat_cols": lambda g, t, inp, out, aux: list(
        zip(inp, np.split(g, np.cumsum(aux[:-1]), axis=1))
    ),
    "mean_stack": lambda g, t, inp, out, aux: [(i, g / aux) for i in inp],
    "dropout": lambda g, t, inp, out, aux: [(inp[0], g * aux)],
    "gather_rows": _adj_gather_rows,
    "row_sum": lambda g, t, inp, out, aux: [
        (inp[0], np.broadcast_to(g[:, None], aux).copy())
    ],
    "sum_all": lambda g, t, inp, out, aux: [(inp[0], np.broadcast_to(g, aux).copy())],
    "mean_all": lambda g, t, inp, out, aux: [
        (inp[0], np.broadcast_to(g / aux[1], aux[0]).copy())
    ],
    "transpose": lambda g, t, inp, out, aux: [(inp[0], g.T)],
    "edge_logits": _adj_edge_logits,
    "segment_softmax": _adj_segment_softmax,
    "segment_weighted_sum": _adj_segment_weighted_sum,
}


def finite_difference_check(
    build: Callable[[ParamStore], tuple[Tape, int]],
    params: ParamStore,
    eps: float = 1e-5,
) -> float:
    """Max relative error between tape gradients and central differences.

    `build` must construct a fresh tape and scalar loss node from the
    given parameters. Error is |analytic - fd| / max(1, |fd|) maximized
    over every parameter coordinate; non-finite evaluations raise with
    the offending coordinate named.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    tape, loss = build(params)
    grads = tape.backward(loss)

    def evaluate() -> float:
        t, node = build(params)
        return float(t.value(node))

    worst = 0.0
    for name, theta in params.items():
        flat = theta.reshape(-1)
        g = grads[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = evaluate()
            flat[i] = orig - eps
            f_minus = evaluate()
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise ValueError(f"non-finite evaluation at {name}[{i}]")
            fd = (f_plus - f_minus) / (2.0 * eps)
            worst = max(worst, abs(g[i] - fd) / max(1.0, abs(fd)))
    return worst
