"""Desk-scale forgetting benchmark: a seeded SBM world small enough for CPU
verification runs, with base checkpoints shared between method variants.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .config import build_dataset, parse_experiment
from .harness import METHODS, MethodSpec, RunSummary, rng_streams, run_base_stage, run_method, split_dataset


def desk_config(seed: int = 0, **overrides) -> dict:
    """15 base classes plus five 3-way 5-shot sessions on a 1800-node SBM graph.

    Sized so a multi-seed comparison of several methods stays within a
    few CPU minutes; `overrides` update the [train]/[model]/[data] tables.
    """
    raw = {
        "experiment": {"seed": seed},
        "data": {
            "kind": "synthetic",
            "classes": 30,
            "nodes_per_class": 60,
            "feature_dim": 64,
            "feature_noise": 1.6,
            "homophily": 0.6,
            "avg_degree": 20.0,
        },
        "split": {"base_classes": 15, "n_way": 3, "k_shot": 5, "sessions": 6},
        "model": {"hidden": 16, "heads": 4, "out_dim": 16, "dropout": 0.5},
        "train": {
            "alpha": 0.7,
            "base_epochs": 150,
            "tva_noise_rate": 0.10,
            "tau": 15.0,
            "kappa": 0.1,
            "lr": 0.01,
            "weight_decay": 5e-4,
            "inc_epochs": 5,
            "ipcn_iters": 2,
            "beta": 0.95,
            "sigma": 1.0,
        },
    }
    for table, values in overrides.items():
        raw.setdefault(table, {}).update(values)
    return raw


VARIANTS: dict[str, MethodSpec] = {
    **METHODS,
    "tap_no_ema": replace(METHODS["tap"], name="tap_no_ema", use_ema=False),
    "tap_no_ipcn": replace(METHODS["tap"], name="tap_no_ipcn", use_ipcn=False),
    "tap_no_pso": replace(METHODS["tap"], name="tap_no_pso", use_pso=False),
}


def run_forgetting_benchmark(
    seeds: list[int], methods: list[str], config: dict | None = None
) -> dict[str, list[RunSummary]]:
    """Run each method over each seed, sharing splits and base checkpoints per seed.

    Methods with the same base-stage recipe (augmented vs plain) reuse one
    trained backbone per seed, which keeps comparisons paired and fast.
    """
    results: dict[str, list[RunSummary]] = {name: [] for name in methods}
    for seed in seeds:
        raw = desk_config(seed) if config is None else {**config, "experiment": {"seed": seed}}
        exp = parse_experiment(raw)
        streams = rng_streams(seed)
        graph, features, labels = build_dataset(raw, streams["split"])
        sessions = split_dataset(graph, features, labels, exp.split, streams["split"])
        enc_cfg = exp.encoder_cfg(features.shape[1])

        base_cache: dict[bool, object] = {}
        for name in methods:
            spec = VARIANTS[name]
            if spec.tmca not in base_cache:
                base_rng = rng_streams(seed)["base"]
                base_cache[spec.tmca] = run_base_stage(sessions[0], enc_cfg, exp.base, spec, base_rng)
            summary = run_method(
                sessions,
                enc_cfg,
                exp.base,
                exp.incremental,
                spec,
                seed,
                cfg_hash=exp.hash,
                base_result=base_cache[spec.tmca],
            )
            results[name].append(summary)
    return results


def median_last_accuracy(summaries: list[RunSummary]) -> float:
    return float(np.median([s.reports[-1].acc_all for s in summaries]))


def median_pd(summaries: list[RunSummary]) -> float:
    return float(np.median([s.pd for s in summaries]))
