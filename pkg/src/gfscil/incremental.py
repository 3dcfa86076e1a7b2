"""Per-session incremental protocol: novel prototypes, iterative calibration,
support-set fine-tuning, parameter averaging, and old-prototype shift.

Each session sees only its own disjoint subgraph (via a TrainView); the
only state carried across sessions is the encoder parameters, the
prototype bank, and the optimizer moments.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .autodiff import ParamStore, Tape
from .encoder import AdamState, EncoderConfig, adam_step, ema_update, embed, encode
from .prototypes import LossConfig, PrototypeBank, compute_prototypes, cosine_matrix, margin_loss
from .sessions import TrainView

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class IncrementalConfig:
    epochs: int = 5  # fine-tuning steps per session
    ipcn_iters: int = 2
    beta: float = 0.95  # parameter-averaging momentum
    sigma: float = 1.0  # RBF bandwidth for the old-prototype shift
    lr: float = 0.01
    weight_decay: float = 5e-4
    loss: LossConfig = LossConfig()
    use_ipcn: bool = True
    use_pso: bool = True
    use_ema: bool = True
    refresh_prototypes_each_epoch: bool = True
    # recompute novel prototypes under the final (post-averaging) parameters so the
    # bank lives in the same feature space the session is evaluated in
    final_novel_refresh: bool = True
    freeze_backbone: bool = False

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("at least one fine-tuning epoch is required")
        if self.ipcn_iters < 0:
            raise ValueError("calibration iteration count must be non-negative")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")


@dataclass
class SessionState:
    """Everything allowed to survive a session boundary."""

    t: int
    params: ParamStore
    bank: PrototypeBank
    opt_state: AdamState


def init_novel_prototypes(
    bank: PrototypeBank,
    support_embeddings: np.ndarray,
    support_labels: np.ndarray,
    classes,
    session: int,
) -> PrototypeBank:
    """Append (or refresh) per-class support means with the session tag."""
    out = bank.copy()
    protos = compute_prototypes(support_embeddings, support_labels, classes)
    for c, vec in protos.items():
        if c in out:
            out.replace(c, vec)
        else:
            out.add(c, vec, session=session)
    return out


def ipcn_probabilities(query_embeddings: np.ndarray, bank: PrototypeBank, tau: float) -> np.ndarray:
    """Per-query softmax of tau-scaled cosine against every bank prototype."""
    sims = tau * cosine_matrix(query_embeddings, bank.matrix())
    sims -= sims.max(axis=1, keepdims=True)
    w = np.exp(sims)
    return w / w.sum(axis=1, keepdims=True)


def ipcn_calibrate(
    bank: PrototypeBank,
    support_embeddings: np.ndarray,
    support_labels: np.ndarray,
    query_embeddings: np.ndarray,
    tau: float,
    novel_classes,
) -> PrototypeBank:
    """One calibration pass over the novel prototypes.

    Query nodes are pseudo-assigned to their argmax class; those landing
    on a novel class join that class's weighted pool. Old-class
    prototypes are never modified.
    """
    out = bank.copy()
    novel = [int(c) for c in novel_classes]
    if query_embeddings.shape[0]:
        probs = ipcn_probabilities(query_embeddings, out, tau)
        class_ids = np.asarray(out.classes)
        pseudo = class_ids[np.argmax(probs, axis=1)]
    else:
        probs = np.empty((0, len(out)))
        pseudo = np.empty(0, dtype=np.int64)
    rows = out.rows_for(novel)
    for c, row in zip(novel, rows):
        members = np.flatnonzero(pseudo == c)
        support_rows = support_embeddings[np.asarray(support_labels) == c]
        weight = float(support_rows.shape[0])
        total = support_rows.sum(axis=0)
        if members.size:
            p = probs[members, row]
            total = total + (p[:, None] * query_embeddings[members]).sum(axis=0)
            weight += float(p.sum())
        if weight > 0.0:  # classes without support or pseudo members keep their prototype
            out.replace(c, total / weight)
    return out


def ipcn_refine(
    bank: PrototypeBank,
    support_embeddings: np.ndarray,
    support_labels: np.ndarray,
    query_embeddings: np.ndarray,
    tau: float,
    novel_classes,
    iters: int,
) -> PrototypeBank:
    """Iterate probability -> calibration -> assignment; zero iterations is the identity."""
    out = bank.copy()
    for _ in range(iters):
        out = ipcn_calibrate(out, support_embeddings, support_labels, query_embeddings, tau, novel_classes)
    return out


def pso_shift(
    old_prototypes: dict[int, np.ndarray],
    features_before: np.ndarray,
    features_after: np.ndarray,
    sigma: float,
) -> dict[int, np.ndarray]:
    """Shift old prototypes by the RBF-weighted support feature drift.

    Weights per class are exp(-||f_before - rho||^2 / (2 sigma^2))
    normalized over the support set; if every weight underflows to zero
    the shift falls back to uniform weighting and logs a diagnostic.
    """
    drift = features_after - features_before
    shifted: dict[int, np.ndarray] = {}
    for c, rho in old_prototypes.items():
        sq_dist = np.sum((features_before - rho) ** 2, axis=1)
        phi = np.exp(-sq_dist / (2.0 * sigma**2))
        total = phi.sum()
        if total == 0.0:
            log.warning("RBF weights underflowed for class %s; falling back to uniform weights", c)
            weights = np.full(phi.shape[0], 1.0 / phi.shape[0])
        else:
            weights = phi / total
        shifted[c] = rho + weights @ drift
    return shifted


def finetune_epoch(
    view: TrainView,
    bank: PrototypeBank,
    params: ParamStore,
    enc_cfg: EncoderConfig,
    cfg: IncrementalConfig,
    opt_state: AdamState,
    rng: np.random.Generator,
    trainable: set[str] | None = None,
) -> tuple[ParamStore, float]:
    """One margin-loss gradient step on the support set against all stored prototypes."""
    tape = Tape()
    node = encode(tape, view.graph, view.features, params, enc_cfg, train=True, rng=rng)
    support = tape.gather_rows(node, view.support_nodes)
    rows = bank.rows_for(view.support_labels)
    loss_node = margin_loss(tape, support, rows, bank.matrix(), cfg.loss)
    loss = float(tape.value(loss_node))
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite fine-tuning loss in session {view.t}")
    grads = tape.backward(loss_node)
    new_params = adam_step(
        params, grads, opt_state, lr=cfg.lr, weight_decay=cfg.weight_decay, trainable=trainable
    )
    return new_params, loss


def _calibrated_novel_bank(
    bank: PrototypeBank,
    emb: np.ndarray,
    view: TrainView,
    novel: list[int],
    cfg: IncrementalConfig,
    refresh_means: bool,
) -> PrototypeBank:
    if refresh_means:
        bank = init_novel_prototypes(
            bank, emb[view.support_nodes], view.support_labels, novel, session=view.t
        )
    if cfg.use_ipcn and cfg.ipcn_iters > 0:
        bank = ipcn_refine(
            bank,
            emb[view.support_nodes],
            view.support_labels,
            emb[view.query_nodes],
            cfg.loss.tau,
            novel,
            cfg.ipcn_iters,
        )
    return bank


def run_session(
    state: SessionState,
    view: TrainView,
    enc_cfg: EncoderConfig,
    cfg: IncrementalConfig,
    rng: np.random.Generator,
) -> SessionState:
    """One full incremental session.

    Per epoch: refresh novel prototypes from support means, calibrate
    them against the unlabeled query nodes, then take one fine-tuning
    step. Afterwards blend parameters with the previous session's,
    recompute the novel prototypes under the blended parameters, and
    shift every pre-existing prototype by the estimated feature drift.
    """
    theta_prev = state.params
    params = state.params
    bank = state.bank.copy()
    novel = sorted(int(c) for c in view.classes)
    trainable = {n for n in params.names() if n.startswith("proj.")} if cfg.freeze_backbone else None

    for epoch in range(cfg.epochs):
        emb = embed(view.graph, view.features, params, enc_cfg)
        bank = _calibrated_novel_bank(
            bank, emb, view, novel, cfg,
            refresh_means=epoch == 0 or cfg.refresh_prototypes_each_epoch,
        )
        params, _ = finetune_epoch(view, bank, params, enc_cfg, cfg, state.opt_state, rng, trainable)

    if cfg.use_ema:
        params = ema_update(theta_prev, params, cfg.beta)

    emb_final = None
    if cfg.final_novel_refresh:
        emb_final = embed(view.graph, view.features, params, enc_cfg)
        bank = _calibrated_novel_bank(bank, emb_final, view, novel, cfg, refresh_means=True)

    old_classes = bank.classes_before(view.t)
    if cfg.use_pso and old_classes:
        before = embed(view.graph, view.features, theta_prev, enc_cfg)
        if emb_final is None:
            emb_final = embed(view.graph, view.features, params, enc_cfg)
        shifted = pso_shift(
            {c: bank.get(c) for c in old_classes},
            before[view.support_nodes],
            emb_final[view.support_nodes],
            cfg.sigma,
        )
        for c, vec in shifted.items():
            bank.replace(c, vec)

    return SessionState(t=view.t, params=params, bank=bank, opt_state=state.opt_state)


def append_novel_prototypes(
    state: SessionState, view: TrainView, enc_cfg: EncoderConfig
) -> SessionState:
    """Frozen-model session: support-mean prototypes only, no parameter update."""
    emb = embed(view.graph, view.features, state.params, enc_cfg)
    bank = init_novel_prototypes(
        state.bank,
        emb[view.support_nodes],
        view.support_labels,
        sorted(int(c) for c in view.classes),
        session=view.t,
    )
    return SessionState(t=view.t, params=state.params, bank=bank, opt_state=state.opt_state)
