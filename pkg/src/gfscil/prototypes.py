"""Prototype bank, cosine-similarity prediction, and the scaled margin loss."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import Tape

BANK_MAGIC = b"GFSCILB1"


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarities; rows with zero norm contribute 0."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    an = np.divide(a, na, out=np.zeros_like(a), where=na > 0)
    bn = np.divide(b, nb, out=np.zeros_like(b), where=nb > 0)
    return an @ bn.T


class PrototypeBank:
    """Ordered map class id -> (prototype vector, session of origin).

    Insertion order is class discovery order; old entries are replaced
    copy-on-write by the calibration steps, never re-ordered.
    """

    def __init__(self):
        self._order: list[int] = []
        self._vectors: dict[int, np.ndarray] = {}
        self._sessions: dict[int, int] = {}

    def __len__(self) -> int:
        return len(self._order)

    def __contains__(self, class_id: int) -> bool:
        return class_id in self._vectors

    @property
    def classes(self) -> list[int]:
        return list(self._order)

    @property
    def dim(self) -> int:
        if not self._order:
            raise ValueError("empty prototype bank")
        return self._vectors[self._order[0]].shape[0]

    def add(self, class_id: int, vector: np.ndarray, session: int) -> None:
        class_id = int(class_id)
        if class_id in self._vectors:
            raise ValueError(f"class {class_id} already in bank")
        vector = np.asarray(vector, dtype=np.float64)
        if self._order and vector.shape != (self.dim,):
            raise ValueError("prototype dimensionality mismatch")
        self._order.append(class_id)
        self._vectors[class_id] = vector
        self._sessions[class_id] = int(session)

    def get(self, class_id: int) -> np.ndarray:
        return self._vectors[int(class_id)]

    def session_of(self, class_id: int) -> int:
        return self._sessions[int(class_id)]

    def replace(self, class_id: int, vector: np.ndarray) -> None:
        class_id = int(class_id)
        if class_id not in self._vectors:
            raise KeyError(f"class {class_id} not in bank")
        self._vectors[class_id] = np.asarray(vector, dtype=np.float64)

    def matrix(self) -> np.ndarray:
        return np.stack([self._vectors[c] for c in self._order])

    def rows_for(self, class_ids) -> np.ndarray:
        """Bank-matrix row index for each class id."""
        index = {c: i for i, c in enumerate(self._order)}
        return np.asarray([index[int(c)] for c in np.atleast_1d(class_ids)], dtype=np.int64)

    def classes_from(self, session: int) -> list[int]:
        return [c for c in self._order if self._sessions[c] == session]

    def classes_before(self, session: int) -> list[int]:
        return [c for c in self._order if self._sessions[c] < session]

    def copy(self) -> "PrototypeBank":
        out = PrototypeBank()
        for c in self._order:
            out.add(c, self._vectors[c].copy(), self._sessions[c])
        return out

    def save(self, path) -> None:
        """JSON header (class ids, session tags, dim) followed by packed float64 vectors."""
        header = {"classes": self._order, "sessions": [self._sessions[c] for c in self._order], "dim": self.dim}
        blob = json.dumps(header, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(BANK_MAGIC)
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            for c in self._order:
                fh.write(self._vectors[c].astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "PrototypeBank":
        with open(path, "rb") as fh:
            if fh.read(len(BANK_MAGIC)) != BANK_MAGIC:
                raise ValueError(f"not a prototype bank file: {path}")
            (header_len,) = struct.unpack("<I", fh.read(4))
            header = json.loads(fh.read(header_len))
            bank = cls()
            dim = int(header["dim"])
            for class_id, session in zip(header["classes"], header["sessions"]):
                vec = np.frombuffer(fh.read(dim * 8), dtype="<f8", count=dim)
                bank.add(class_id, vec.astype(np.float64), session)
        return bank


def compute_prototypes(embeddings: np.ndarray, labels: np.ndarray, class_ids) -> dict[int, np.ndarray]:
    """Per-class mean embedding for every class in `class_ids`."""
    labels = np.asarray(labels)
    out: dict[int, np.ndarray] = {}
    for c in class_ids:
        rows = embeddings[labels == c]
        if rows.shape[0] == 0:
            raise ValueError(f"class {c} has no labeled embeddings")
        out[int(c)] = rows.mean(axis=0)
    return out


def predict_proba(embedding: np.ndarray, bank: PrototypeBank, tau: float) -> np.ndarray:
    """Softmax over tau-scaled cosine similarities to every bank prototype.

    Accepts a single vector or a batch; returns probabilities in bank order.
    """
    if len(bank) == 0:
        raise ValueError("empty prototype bank")
    emb = np.asarray(embedding, dtype=np.float64)
    single = emb.ndim == 1
    sims = cosine_matrix(emb, bank.matrix())
    logits = tau * sims
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    p = w / w.sum(axis=1, keepdims=True)
    return p[0] if single else p


def classify(embedding: np.ndarray, bank: PrototypeBank) -> np.ndarray:
    """Argmax cosine class; exact ties resolved to the lowest class id."""
    if len(bank) == 0:
        raise ValueError("empty prototype bank")
    emb = np.asarray(embedding, dtype=np.float64)
    single = emb.ndim == 1
    sims = cosine_matrix(emb, bank.matrix())
    class_ids = np.asarray(bank.classes)
    # stable tie-break: sort candidate columns by class id, then argmax picks the lowest id
    id_order = np.argsort(class_ids, kind="stable")
    best = np.argmax(sims[:, id_order], axis=1)
    preds = class_ids[id_order][best]
    return preds[0] if single else preds


@dataclass(frozen=True)
class LossConfig:
    tau: float = 15.0
    kappa: float = 0.1

    def __post_init__(self) -> None:
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.kappa < 0:
            raise ValueError("kappa must be non-negative")


def margin_loss(
    tape: Tape,
    embeddings: int,
    label_rows: np.ndarray,
    prototypes,
    cfg: LossConfig,
) -> int:
    """Mean margin-based loss node over a batch of embedding rows.

    Target logit tau * (cos - kappa), non-target logits tau * cos.
    `prototypes` is either a constant (C, D) array or a tape node; the
    gradient flows through prototype nodes but not through constants.
    """
    label_rows = np.asarray(label_rows, dtype=np.int64)
    proto_node = prototypes if isinstance(prototypes, (int, np.integer)) else tape.constant(np.asarray(prototypes))
    emb_n = tape.row_l2_normalize(embeddings)
    proto_n = tape.row_l2_normalize(int(proto_node))
    cos = tape.matmul(emb_n, tape.transpose(proto_n))
    n_classes = tape.value(cos).shape[1]
    onehot = np.zeros((label_rows.shape[0], n_classes))
    onehot[np.arange(label_rows.shape[0]), label_rows] = 1.0
    logits = tape.sub(tape.scale(cos, cfg.tau), tape.constant(cfg.tau * cfg.kappa * onehot))
    # log-sum-exp with a constant shift; the shift cancels analytically
    shift = tape.value(logits).max(axis=1, keepdims=True)
    z = tape.sub(logits, tape.constant(np.broadcast_to(shift, tape.value(logits).shape).copy()))
    log_norm = tape.add(tape.log(tape.row_sum(tape.exp(z))), tape.constant(shift[:, 0]))
    target = tape.row_sum(tape.mul(logits, tape.constant(onehot)))
    return tape.mean_all(tape.sub(log_norm, target))


def margin_loss_value(
    embeddings: np.ndarray, label_rows: np.ndarray, prototypes: np.ndarray, cfg: LossConfig
) -> float:
    """Value-only margin loss for diagnostics and tests."""
    tape = Tape()
    node = margin_loss(tape, tape.constant(embeddings), label_rows, prototypes, cfg)
    return float(tape.value(node))
