"""Config file loading (TOML or JSON) and assembly into typed run configs."""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import dataio
from .encoder import EncoderConfig
from .graph import SparseGraph, build_graph
from .harness import SplitConfig, config_hash, sbm_probabilities, synth_sbm
from .incremental import IncrementalConfig
from .prototypes import LossConfig
from .tmca import BaseTrainConfig


def load_config(path) -> dict:
    path = Path(path)
    if path.suffix == ".json":
        return json.loads(path.read_text())
    with open(path, "rb") as fh:
        return tomllib.load(fh)


@dataclass(frozen=True)
class Experiment:
    """One fully resolved experiment description."""

    raw: dict
    seed: int
    split: SplitConfig
    base: BaseTrainConfig
    incremental: IncrementalConfig
    model: dict  # encoder kwargs except in_dim

    def encoder_cfg(self, in_dim: int) -> EncoderConfig:
        return EncoderConfig(in_dim=in_dim, **self.model)

    @property
    def hash(self) -> str:
        return config_hash(self.raw)


def parse_experiment(raw: dict) -> Experiment:
    exp = raw.get("experiment", {})
    split_cfg = raw.get("split", {})
    model = raw.get("model", {})
    train = raw.get("train", {})

    split = SplitConfig(
        base_classes=int(split_cfg["base_classes"]),
        n_way=int(split_cfg["n_way"]),
        k_shot=int(split_cfg["k_shot"]),
        sessions=int(split_cfg["sessions"]),
        val_fraction=float(split_cfg.get("val_fraction", 0.30)),
        train_fraction=float(split_cfg.get("train_fraction", 0.80)),
    )
    loss = LossConfig(tau=float(train.get("tau", 15.0)), kappa=float(train.get("kappa", 0.1)))
    base = BaseTrainConfig(
        alpha=float(train.get("alpha", 0.7)),
        epochs=int(train.get("base_epochs", 1000)),
        noise_rate=float(train.get("tva_noise_rate", 0.10)),
        n_way=split.n_way,
        lr=float(train.get("lr", 0.01)),
        weight_decay=float(train.get("weight_decay", 5e-4)),
        loss=loss,
        use_tfa=bool(train.get("use_tfa", True)),
        use_tva=bool(train.get("use_tva", True)),
    )
    inc = IncrementalConfig(
        epochs=int(train.get("inc_epochs", 5)),
        ipcn_iters=int(train.get("ipcn_iters", 2)),
        beta=float(train.get("beta", 0.95)),
        sigma=float(train.get("sigma", 1.0)),
        lr=float(train.get("lr", 0.01)),
        weight_decay=float(train.get("weight_decay", 5e-4)),
        loss=loss,
    )
    model_kwargs = {
        "hidden": int(model.get("hidden", 16)),
        "heads": int(model.get("heads", 12)),
        "out_dim": int(model.get("out_dim", 16)),
        "dropout": float(model.get("dropout", 0.5)),
        "leaky_slope": float(model.get("leaky_slope", 0.2)),
    }
    return Experiment(
        raw=raw,
        seed=int(exp.get("seed", 0)),
        split=split,
        base=base,
        incremental=inc,
        model=model_kwargs,
    )


def build_dataset(raw: dict, rng: np.random.Generator) -> tuple[SparseGraph, np.ndarray, np.ndarray]:
    """Materialize the [data] table: synthetic SBM or on-disk files."""
    data = raw.get("data", {})
    kind = data.get("kind", "synthetic")
    if kind == "synthetic":
        classes = int(data["classes"])
        npc = int(data["nodes_per_class"])
        if "p_intra" in data:
            p_intra, p_inter = float(data["p_intra"]), float(data["p_inter"])
        else:
            p_intra, p_inter = sbm_probabilities(
                classes, npc, float(data.get("homophily", 0.6)), float(data.get("avg_degree", 10.0))
            )
        return synth_sbm(
            classes,
            npc,
            p_intra,
            p_inter,
            int(data.get("feature_dim", 64)),
            float(data.get("feature_noise", 1.0)),
            rng,
        )
    if kind == "files":
        features = dataio.read_features(data["features"])
        n = features.shape[0]
        edges = dataio.read_edge_list(data["edges"])
        labels = dataio.read_labels(data["labels"], n)
        return build_graph(edges, n), features, labels
    raise ValueError(f"unknown data kind {kind!r}")
