"""Triple-branch multi-topology class augmentation and the base-session trainer.

The base session trains against three branches with disjoint label
spaces: the original graph, a topology-free copy (identity adjacency,
labels shifted by C), and a topology-varying copy (class-partitioned,
noise-injected adjacency, labels shifted by 2C). All active branches'
prototypes form one classification head, so a C-class problem is trained
as a 3C-class problem.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import ParamStore, Tape
from .encoder import AdamState, EncoderConfig, adam_step, embed, encode, init_params
from .graph import SparseGraph, build_graph, identity_adjacency, inject_link_noise, sever_to_class_subset
from .prototypes import LossConfig, PrototypeBank, compute_prototypes, margin_loss
from .sessions import SessionDataset


@dataclass(frozen=True)
class AugmentedBranch:
    kind: str  # "original" | "topology_free" | "topology_varying"
    graph: SparseGraph
    label_offset: int
    class_count: int

    def shift_labels(self, local_labels: np.ndarray) -> np.ndarray:
        return local_labels + self.label_offset


@dataclass(frozen=True)
class TvaPartition:
    subsets: list[np.ndarray]  # global class ids, size N each (last may be smaller)
    pre_noise: list[SparseGraph]  # severed, before noise injection
    noised: list[SparseGraph]
    merged: SparseGraph  # union of the noised per-subset adjacencies


@dataclass(frozen=True)
class BaseTrainConfig:
    alpha: float = 0.7
    epochs: int = 1000
    noise_rate: float = 0.10
    n_way: int = 5  # subset size N for the topology-varying split
    lr: float = 0.01
    weight_decay: float = 5e-4
    loss: LossConfig = LossConfig()
    use_tfa: bool = True
    use_tva: bool = True

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.epochs < 0 or self.n_way < 1:
            raise ValueError("invalid epoch or way count")


def count_arrangements(total_classes: int, subset_size: int) -> int:
    """Exact number of ways to choose one subset of `subset_size` classes."""
    if subset_size < 0 or total_classes < 0:
        raise ValueError("counts must be non-negative")
    if subset_size > total_classes:
        raise ValueError("subset size exceeds class count")
    return math.comb(total_classes, subset_size)


def make_tfa(base: SessionDataset) -> AugmentedBranch:
    """Topology-free branch: self-loop-only adjacency, labels shifted by |C0|."""
    c = len(base.classes)
    return AugmentedBranch(
        kind="topology_free",
        graph=identity_adjacency(base.n),
        label_offset=c,
        class_count=c,
    )


def make_tva(
    base: SessionDataset, n_way: int, noise_rate: float, rng: np.random.Generator
) -> tuple[TvaPartition, AugmentedBranch]:
    """Topology-varying branch: random class split, per-subset severing and noise.

    Classes are split into ceil(C / n_way) disjoint subsets of n_way
    classes (the last keeps the remainder); each subset's adjacency
    retains only intra-subset links before noise is injected into it.
    """
    classes = np.asarray(base.classes)
    order = rng.permutation(classes)
    subsets = [order[i : i + n_way] for i in range(0, classes.size, n_way)]
    pre_noise = [sever_to_class_subset(base.graph, base.labels, subset) for subset in subsets]
    noised = [inject_link_noise(g, noise_rate, rng) for g in pre_noise]
    merged_edges = np.concatenate([g.undirected_edges() for g in noised], axis=0)
    merged = build_graph(merged_edges, base.n)
    c = len(base.classes)
    branch = AugmentedBranch(
        kind="topology_varying", graph=merged, label_offset=2 * c, class_count=c
    )
    return TvaPartition(subsets=subsets, pre_noise=pre_noise, noised=noised, merged=merged), branch


def branch_weights(alpha: float, use_tfa: bool, use_tva: bool) -> tuple[float, float, float]:
    """Loss weights (original, tfa, tva); active augmented branches split 1 - alpha evenly."""
    active = int(use_tfa) + int(use_tva)
    if active == 0:
        return 1.0, 0.0, 0.0
    aug = (1.0 - alpha) / active
    return alpha, aug if use_tfa else 0.0, aug if use_tva else 0.0


def base_loss(tape: Tape, branch_losses: list[tuple[int, float]]) -> int:
    """Weighted sum of per-branch mean losses; zero-weight branches must be omitted."""
    total = None
    for node, weight in branch_losses:
        term = tape.scale(node, weight)
        total = term if total is None else tape.add(total, term)
    if total is None:
        raise ValueError("no branch losses supplied")
    return total


@dataclass
class BaseTrainResult:
    params: ParamStore
    bank: PrototypeBank
    opt_state: AdamState
    losses: list[float]
    head_rows: int = 0  # prototype rows of the training head (3C under full augmentation)


def train_base(
    base: SessionDataset,
    enc_cfg: EncoderConfig,
    cfg: BaseTrainConfig,
    rng: np.random.Generator,
    params: ParamStore | None = None,
) -> BaseTrainResult:
    """Full-batch base-session training; one optimizer step per epoch.

    Every epoch rebuilds the topology-free branch and draws a fresh
    topology-varying partition. Branch prototypes are recomputed from the
    current train-node embeddings and held constant within the step. The
    returned bank holds one eval-mode prototype per base class.
    """
    classes = np.asarray(base.classes)
    class_to_local = {int(c): i for i, c in enumerate(classes)}
    train_nodes = base.support
    local_labels = np.asarray([class_to_local[int(c)] for c in base.labels[train_nodes]])

    if params is None:
        params = init_params(enc_cfg, rng)
    state = AdamState.zeros(params)
    w_orig, w_tfa, w_tva = branch_weights(cfg.alpha, cfg.use_tfa, cfg.use_tva)
    original = AugmentedBranch("original", base.graph, 0, classes.size)
    tfa = make_tfa(base) if w_tfa > 0 else None

    losses: list[float] = []
    head_rows = 0
    for epoch in range(cfg.epochs):
        rng_orig, rng_tfa, rng_tva = rng.spawn(3)
        tape = Tape()
        # zero-weight branches are skipped outright: they contribute neither
        # loss nor prototypes, so alpha = 1 reduces exactly to plain training
        active: list[tuple[AugmentedBranch, np.random.Generator, float]] = []
        if w_orig > 0:
            active.append((original, rng_orig, w_orig))
        if tfa is not None:
            active.append((tfa, rng_tfa, w_tfa))
        if w_tva > 0:
            _, tva = make_tva(base, cfg.n_way, cfg.noise_rate, rng_tva)
            active.append((tva, rng_tva, w_tva))
        if not active:
            raise ValueError("all branch weights are zero")

        # forward every active branch, then build one shared prototype head
        emb_nodes = []
        for branch, branch_rng, _ in active:
            node = encode(tape, branch.graph, base.features, params, enc_cfg, train=True, rng=branch_rng)
            emb_nodes.append(tape.gather_rows(node, train_nodes))
        proto_blocks = []
        for node in emb_nodes:
            protos = compute_prototypes(tape.value(node), local_labels, range(classes.size))
            proto_blocks.append(np.stack([protos[i] for i in range(classes.size)]))
        head = np.concatenate(proto_blocks, axis=0)
        head_rows = head.shape[0]

        terms = []
        for i, ((_, _, weight), node) in enumerate(zip(active, emb_nodes)):
            rows = local_labels + i * classes.size
            terms.append((margin_loss(tape, node, rows, head, cfg.loss), weight))
        loss_node = base_loss(tape, terms)
        loss = float(tape.value(loss_node))
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite base loss at epoch {epoch}")
        losses.append(loss)
        grads = tape.backward(loss_node)
        params = adam_step(params, grads, state, lr=cfg.lr, weight_decay=cfg.weight_decay)

    final = embed(base.graph, base.features, params, enc_cfg)
    prototypes = compute_prototypes(final[train_nodes], base.labels[train_nodes], sorted(base.classes))
    bank = PrototypeBank()
    for c in sorted(base.classes):
        bank.add(c, prototypes[int(c)], session=0)
    return BaseTrainResult(params=params, bank=bank, opt_state=state, losses=losses, head_rows=head_rows)
