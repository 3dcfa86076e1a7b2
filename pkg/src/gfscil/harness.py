"""Experiment harness: inductive session splitting, synthetic graphs, method
runners (full system and baselines), metrics, and report emission.

A run is reproducible from (config, seed): the master seed is split into
named child streams (split, base, incremental) via SeedSequence.spawn, so
independent runs and baselines can share splits while training streams
stay isolated.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .encoder import EncoderConfig, add_projection_head, embed
from .graph import SparseGraph, build_graph, restrict_to_sessions
from .incremental import IncrementalConfig, SessionState, append_novel_prototypes, run_session
from .prototypes import PrototypeBank, classify
from .autodiff import ParamStore
from .sessions import SessionDataset, TrainView
from .tmca import BaseTrainConfig, BaseTrainResult, train_base


# ---------------------------------------------------------------------------
# synthetic data


def sbm_probabilities(
    classes: int, nodes_per_class: int, homophily: float, avg_degree: float
) -> tuple[float, float]:
    """Block probabilities hitting a target same-class edge fraction and mean degree."""
    n = classes * nodes_per_class
    intra_pairs = classes * nodes_per_class * (nodes_per_class - 1) // 2
    inter_pairs = n * (n - 1) // 2 - intra_pairs
    total_edges = n * avg_degree / 2.0
    p_intra = homophily * total_edges / intra_pairs
    p_inter = (1.0 - homophily) * total_edges / inter_pairs
    if p_intra > 1.0 or p_inter > 1.0:
        raise ValueError("target homophily/degree unreachable for this block layout")
    return p_intra, p_inter


def synth_sbm(
    classes: int,
    nodes_per_class: int,
    p_intra: float,
    p_inter: float,
    feature_dim: int,
    feature_noise: float,
    rng: np.random.Generator,
) -> tuple[SparseGraph, np.ndarray, np.ndarray]:
    """Stochastic block model with one-hot class signals plus Gaussian feature noise."""
    if not (0.0 <= p_intra <= 1.0 and 0.0 <= p_inter <= 1.0):
        raise ValueError("edge probabilities must lie in [0, 1]")
    if feature_dim < classes:
        raise ValueError("feature_dim must be at least the class count for one-hot signals")
    n = classes * nodes_per_class
    labels = np.repeat(np.arange(classes, dtype=np.int64), nodes_per_class)
    edges = []
    for ci in range(classes):
        for cj in range(ci, classes):
            p = p_intra if ci == cj else p_inter
            if p <= 0.0:
                continue
            draws = rng.random((nodes_per_class, nodes_per_class))
            if ci == cj:
                rows, cols = np.nonzero(np.triu(draws < p, k=1))
            else:
                rows, cols = np.nonzero(draws < p)
            if rows.size:
                edges.append(
                    np.stack([rows + ci * nodes_per_class, cols + cj * nodes_per_class], axis=1)
                )
    edge_array = np.concatenate(edges, axis=0) if edges else np.empty((0, 2), dtype=np.int64)
    graph = build_graph(edge_array, n)
    features = feature_noise * rng.standard_normal((n, feature_dim))
    features[np.arange(n), labels] += 1.0
    return graph, features, labels


def empirical_homophily(graph: SparseGraph, labels: np.ndarray) -> float:
    edges = graph.undirected_edges()
    if edges.shape[0] == 0:
        return 0.0
    return float(np.mean(labels[edges[:, 0]] == labels[edges[:, 1]]))


# ---------------------------------------------------------------------------
# splitting


@dataclass(frozen=True)
class SplitConfig:
    base_classes: int
    n_way: int
    k_shot: int
    sessions: int  # total including the base session
    val_fraction: float = 0.30
    train_fraction: float = 0.80

    def __post_init__(self) -> None:
        if self.sessions < 1 or self.base_classes < 1 or self.n_way < 1 or self.k_shot < 1:
            raise ValueError("split counts must be positive")
        if not (0.0 <= self.val_fraction <= 1.0 and 0.0 < self.train_fraction < 1.0):
            raise ValueError("fractions out of range")


def split_dataset(
    graph: SparseGraph,
    features: np.ndarray,
    labels: np.ndarray,
    cfg: SplitConfig,
    rng: np.random.Generator,
) -> list[SessionDataset]:
    """Assign classes to sessions, induce disjoint subgraphs, and draw node roles.

    The base session splits each class's nodes into train/test by
    `train_fraction`; incremental sessions draw K support nodes per class
    and withhold `val_fraction` of the remaining query nodes.
    """
    class_ids = np.unique(labels[labels >= 0])
    needed = cfg.base_classes + cfg.n_way * (cfg.sessions - 1)
    if needed > class_ids.size:
        raise ValueError(
            f"need {needed} classes ({cfg.base_classes} base + "
            f"{cfg.sessions - 1} x {cfg.n_way}), dataset has {class_ids.size}"
        )
    order = rng.permutation(class_ids)
    session_classes = [set(order[: cfg.base_classes].tolist())]
    for s in range(cfg.sessions - 1):
        start = cfg.base_classes + s * cfg.n_way
        session_classes.append(set(order[start : start + cfg.n_way].tolist()))

    split = restrict_to_sessions(graph, labels, session_classes)
    sessions: list[SessionDataset] = []
    for t, (sub, node_map) in enumerate(zip(split.graphs, split.node_maps)):
        sub_labels = labels[node_map]
        sub_features = np.ascontiguousarray(features[node_map], dtype=np.float64)
        classes = tuple(sorted(session_classes[t]))
        support_parts, rest_parts = [], []
        for c in classes:
            members = rng.permutation(np.flatnonzero(sub_labels == c))
            if t == 0:
                n_train = min(members.size - 1, max(1, int(round(cfg.train_fraction * members.size))))
                if members.size < 2:
                    raise ValueError(f"base class {c} needs at least 2 nodes for a train/test split")
                support_parts.append(members[:n_train])
                rest_parts.append(members[n_train:])
            else:
                if members.size < cfg.k_shot:
                    raise ValueError(f"class {c} has {members.size} nodes, fewer than K={cfg.k_shot}")
                support_parts.append(members[: cfg.k_shot])
                rest_parts.append(members[cfg.k_shot :])
        support = np.sort(np.concatenate(support_parts))
        rest = np.concatenate(rest_parts)
        if t == 0:
            query, val = np.sort(rest), np.empty(0, dtype=np.int64)
        else:
            rest = rng.permutation(rest)
            n_val = int(cfg.val_fraction * rest.size)
            val, query = np.sort(rest[:n_val]), np.sort(rest[n_val:])
        sessions.append(
            SessionDataset(
                t=t,
                graph=sub,
                features=sub_features,
                labels=sub_labels,
                classes=classes,
                support=support,
                query=query,
                val_query=val,
                node_map=node_map,
            )
        )
    return sessions


# ---------------------------------------------------------------------------
# metrics and reports


@dataclass(frozen=True)
class SessionReport:
    t: int
    acc_all: float
    acc_base: float | None
    acc_novel: float | None
    support_count: int
    query_count: int

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "acc_all": self.acc_all,
            "acc_base": self.acc_base,
            "acc_novel": self.acc_novel,
            "support_count": self.support_count,
            "query_count": self.query_count,
        }


@dataclass(frozen=True)
class RunSummary:
    method: str
    seed: int
    config_hash: str
    reports: tuple[SessionReport, ...]

    @property
    def avg_acc(self) -> float:
        return float(np.mean([r.acc_all for r in self.reports]))

    @property
    def pd(self) -> float:
        return self.reports[0].acc_all - self.reports[-1].acc_all

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "sessions": [r.to_dict() for r in self.reports],
            "avg_acc": self.avg_acc,
            "pd": self.pd,
        }


def summarize(method: str, seed: int, config_hash: str, reports: list[SessionReport]) -> RunSummary:
    if not reports:
        raise ValueError("at least one session report is required")
    return RunSummary(method=method, seed=seed, config_hash=config_hash, reports=tuple(reports))


def evaluate(
    params: ParamStore,
    enc_cfg: EncoderConfig,
    bank: PrototypeBank,
    sessions: list[SessionDataset],
    base_classes: set[int],
    t: int,
) -> SessionReport:
    """Classify every retained query node of sessions 0..t under the current model.

    Each query node is embedded within its own session graph; accuracy is
    reported overall and restricted to base/novel true labels.
    """
    correct, truth = [], []
    support_count = query_count = 0
    for ds in sessions[: t + 1]:
        if ds.query.size == 0:
            continue
        emb = embed(ds.graph, ds.features, params, enc_cfg)
        preds = classify(emb[ds.query], bank)
        correct.append(preds == ds.labels[ds.query])
        truth.append(ds.labels[ds.query])
        support_count += int(ds.support.size)
        query_count += int(ds.query.size)
    if not correct:
        raise ValueError("no query nodes to evaluate in sessions 0..{}".format(t))
    hits = np.concatenate(correct)
    labels = np.concatenate(truth)
    is_base = np.isin(labels, np.asarray(sorted(base_classes)))
    acc_base = float(hits[is_base].mean()) if is_base.any() else None
    acc_novel = float(hits[~is_base].mean()) if (~is_base).any() else None
    return SessionReport(
        t=t,
        acc_all=float(hits.mean()),
        acc_base=acc_base,
        acc_novel=acc_novel,
        support_count=support_count,
        query_count=query_count,
    )


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def emit_report(summary: RunSummary, path) -> None:
    path = Path(path)
    try:
        path.write_text(json.dumps(summary.to_dict(), indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"failed to write report to {path}: {exc}") from exc


def load_report(path) -> dict:
    report = json.loads(Path(path).read_text())
    validate_report(report)
    return report


def validate_report(report: dict) -> None:
    required = {"method", "seed", "config_hash", "sessions", "avg_acc", "pd"}
    missing = required - report.keys()
    if missing:
        raise ValueError(f"report missing fields: {sorted(missing)}")
    for entry in report["sessions"]:
        entry_missing = {"t", "acc_all", "acc_base", "acc_novel"} - entry.keys()
        if entry_missing:
            raise ValueError(f"session entry missing fields: {sorted(entry_missing)}")


def emit_plot_data(summaries: list[RunSummary], path) -> None:
    """CSV of (session, method, accuracy) rows for external plotting."""
    lines = ["session,method,accuracy"]
    for summary in summaries:
        for report in summary.reports:
            lines.append(f"{report.t},{summary.method},{report.acc_all!r}")
    try:
        Path(path).write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"failed to write plot data to {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# method runners


@dataclass(frozen=True)
class MethodSpec:
    """Which pieces of the system a run uses; baselines are restrictions of the full method."""

    name: str
    tmca: bool = True
    finetune: bool = True
    use_ipcn: bool = True
    use_pso: bool = True
    use_ema: bool = True
    freeze_backbone: bool = False


METHODS: dict[str, MethodSpec] = {
    "tap": MethodSpec("tap"),
    "finetune": MethodSpec("finetune", tmca=False, use_ipcn=False, use_pso=False, use_ema=False),
    "frozen": MethodSpec("frozen", tmca=False, finetune=False),
    "frozen_projection": MethodSpec(
        "frozen_projection",
        tmca=False,
        use_ipcn=False,
        use_pso=False,
        use_ema=False,
        freeze_backbone=True,
    ),
}


def rng_streams(seed: int) -> dict[str, np.random.Generator]:
    """Documented split of the master seed into independent named streams."""
    split, base, inc = np.random.SeedSequence(seed).spawn(3)
    return {
        "split": np.random.default_rng(split),
        "base": np.random.default_rng(base),
        "incremental": np.random.default_rng(inc),
    }


def run_base_stage(
    base: SessionDataset,
    enc_cfg: EncoderConfig,
    base_cfg: BaseTrainConfig,
    spec: MethodSpec,
    rng: np.random.Generator,
) -> BaseTrainResult:
    cfg = base_cfg if spec.tmca else replace(base_cfg, use_tfa=False, use_tva=False)
    return train_base(base, enc_cfg, cfg, rng)


def run_incremental_stage(
    sessions: list[SessionDataset],
    enc_cfg: EncoderConfig,
    inc_cfg: IncrementalConfig,
    spec: MethodSpec,
    base_result: BaseTrainResult,
    rng: np.random.Generator,
    method: str,
    seed: int,
    cfg_hash: str,
) -> RunSummary:
    """Run sessions 1..m-1 from a trained base, evaluating after every session."""
    params = base_result.params
    if spec.freeze_backbone:
        params, enc_cfg = add_projection_head(params, enc_cfg)
    state = SessionState(t=0, params=params, bank=base_result.bank, opt_state=base_result.opt_state)
    base_classes = set(sessions[0].classes)
    reports = [evaluate(state.params, enc_cfg, state.bank, sessions, base_classes, t=0)]
    cfg = replace(
        inc_cfg,
        use_ipcn=inc_cfg.use_ipcn and spec.use_ipcn,
        use_pso=inc_cfg.use_pso and spec.use_pso,
        use_ema=inc_cfg.use_ema and spec.use_ema,
        freeze_backbone=spec.freeze_backbone,
    )
    for ds in sessions[1:]:
        view = TrainView(ds)
        if spec.finetune:
            state = run_session(state, view, enc_cfg, cfg, rng.spawn(1)[0])
        else:
            state = append_novel_prototypes(state, view, enc_cfg)
        view.retire()
        reports.append(evaluate(state.params, enc_cfg, state.bank, sessions, base_classes, t=ds.t))
    return summarize(method, seed, cfg_hash, reports)


def run_method(
    sessions: list[SessionDataset],
    enc_cfg: EncoderConfig,
    base_cfg: BaseTrainConfig,
    inc_cfg: IncrementalConfig,
    spec: MethodSpec,
    seed: int,
    cfg_hash: str = "",
    base_result: BaseTrainResult | None = None,
) -> RunSummary:
    """Full pipeline for one method and seed; `base_result` lets runs share a backbone."""
    streams = rng_streams(seed)
    if base_result is None:
        base_result = run_base_stage(sessions[0], enc_cfg, base_cfg, spec, streams["base"])
    return run_incremental_stage(
        sessions, enc_cfg, inc_cfg, spec, base_result, streams["incremental"], spec.name, seed, cfg_hash
    )


def run_baseline(
    kind: str,
    sessions: list[SessionDataset],
    enc_cfg: EncoderConfig,
    base_cfg: BaseTrainConfig,
    inc_cfg: IncrementalConfig,
    seed: int,
    cfg_hash: str = "",
    base_result: BaseTrainResult | None = None,
) -> RunSummary:
    if kind not in ("finetune", "frozen", "frozen_projection"):
        raise ValueError(f"unknown baseline kind {kind!r}")
    return run_method(sessions, enc_cfg, base_cfg, inc_cfg, METHODS[kind], seed, cfg_hash, base_result)
