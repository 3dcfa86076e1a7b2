"""Command-line pipeline: prepare-splits, train-base, run-incremental, baseline, report."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import dataio
from .config import Experiment, build_dataset, load_config, parse_experiment
from .encoder import AdamState, load_params, save_params
from .harness import (
    METHODS,
    MethodSpec,
    emit_plot_data,
    emit_report,
    load_report,
    rng_streams,
    run_base_stage,
    run_incremental_stage,
    run_method,
    split_dataset,
)
from .prototypes import PrototypeBank
from .tmca import BaseTrainResult


def _save_adam(state: AdamState, path) -> None:
    arrays = {f"m::{k}": v for k, v in state.m.items()}
    arrays.update({f"v::{k}": v for k, v in state.v.items()})
    np.savez(path, step=np.asarray(state.step), **arrays)


def _load_adam(path) -> AdamState:
    with np.load(path) as z:
        state = AdamState(step=int(z["step"]))
        for key in z.files:
            if key.startswith("m::"):
                state.m[key[3:]] = z[key]
            elif key.startswith("v::"):
                state.v[key[3:]] = z[key]
    return state


def _prepare(exp: Experiment, raw: dict, out: Path) -> None:
    streams = rng_streams(exp.seed)
    graph, features, labels = build_dataset(raw, streams["split"])
    sessions = split_dataset(graph, features, labels, exp.split, streams["split"])
    meta = {
        "config_hash": exp.hash,
        "seed": exp.seed,
        "feature_dim": int(features.shape[1]),
        "class_assignment": {str(ds.t): list(ds.classes) for ds in sessions},
    }
    dataio.save_sessions(out / "splits", sessions, meta)
    print(f"wrote {len(sessions)} session splits to {out / 'splits'}")


def _train_base(exp: Experiment, out: Path, spec: MethodSpec, base_cfg_override=None) -> None:
    sessions, manifest = dataio.load_sessions(out / "splits")
    enc_cfg = exp.encoder_cfg(manifest["feature_dim"])
    base_cfg = base_cfg_override if base_cfg_override is not None else exp.base
    rng = rng_streams(exp.seed)["base"]
    result = run_base_stage(sessions[0], enc_cfg, base_cfg, spec, rng)
    base_dir = out / f"base_{'tmca' if spec.tmca else 'plain'}"
    base_dir.mkdir(parents=True, exist_ok=True)
    save_params(result.params, base_dir / "encoder.ckpt")
    result.bank.save(base_dir / "bank.ckpt")
    _save_adam(result.opt_state, base_dir / "adam.npz")
    meta = {
        "config_hash": exp.hash,
        "seed": exp.seed,
        "base_kind": "tmca" if spec.tmca else "plain",
        "use_tfa": bool(spec.tmca and base_cfg.use_tfa),
        "use_tva": bool(spec.tmca and base_cfg.use_tva),
        "epochs": base_cfg.epochs,
        "final_loss": result.losses[-1] if result.losses else None,
    }
    (base_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    print(f"trained base ({meta['base_kind']}, {base_cfg.epochs} epochs) -> {base_dir}")


def _load_base(out: Path, kind: str) -> BaseTrainResult:
    base_dir = out / f"base_{kind}"
    return BaseTrainResult(
        params=load_params(base_dir / "encoder.ckpt"),
        bank=PrototypeBank.load(base_dir / "bank.ckpt"),
        opt_state=_load_adam(base_dir / "adam.npz"),
        losses=[],
    )


def _run_incremental(exp: Experiment, out: Path, args) -> None:
    sessions, manifest = dataio.load_sessions(out / "splits")
    enc_cfg = exp.encoder_cfg(manifest["feature_dim"])
    base_meta = json.loads((out / "base_tmca" / "meta.json").read_text())
    for flag, key in (("no_tfa", "use_tfa"), ("no_tva", "use_tva")):
        if getattr(args, flag) and base_meta.get(key, True):
            raise SystemExit(
                f"--{flag.replace('_', '-')} requires a base trained the same way; "
                f"rerun `gfscil train-base --{flag.replace('_', '-')}` first"
            )
    spec = METHODS["tap"]
    name = "tap"
    name += "_no_tfa" if not base_meta.get("use_tfa", True) else ""
    name += "_no_tva" if not base_meta.get("use_tva", True) else ""
    for flag, field in (("no_ipcn", "use_ipcn"), ("no_pso", "use_pso"), ("no_ema", "use_ema")):
        if getattr(args, flag):
            spec = replace(spec, **{field: False})
            name += f"_{flag}"
    if args.freeze_backbone:
        spec = replace(spec, freeze_backbone=True)
        name += "_fproj"
    spec = replace(spec, name=name)

    base_result = _load_base(out, "tmca")
    rng = rng_streams(exp.seed)["incremental"]
    summary = run_incremental_stage(
        sessions, enc_cfg, exp.incremental, spec, base_result, rng, spec.name, exp.seed, exp.hash
    )
    report_path = out / f"report_{spec.name}_{exp.seed}.json"
    emit_report(summary, report_path)
    emit_plot_data([summary], out / f"curves_{spec.name}_{exp.seed}.csv")
    last = summary.reports[-1]
    print(f"{spec.name}: avg_acc={summary.avg_acc:.4f} pd={summary.pd:.4f} last={last.acc_all:.4f}")
    print(f"report -> {report_path}")


def _add_ablation_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--no-tfa", action="store_true", help="drop the topology-free branch")
    parser.add_argument("--no-tva", action="store_true", help="drop the topology-varying branch")
    parser.add_argument("--no-ipcn", action="store_true", help="skip novel-prototype calibration")
    parser.add_argument("--no-pso", action="store_true", help="skip the old-prototype shift")
    parser.add_argument("--no-ema", action="store_true", help="keep fine-tuned parameters unblended")
    parser.add_argument("--freeze-backbone", action="store_true", help="fine-tune only a projection head")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="gfscil",
        description="Inductive graph few-shot class-incremental training and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_prep = sub.add_parser("prepare-splits", help="build the dataset and persist session splits")
    p_prep.add_argument("--config", required=True)
    p_prep.add_argument("--out", default="run")

    p_base = sub.add_parser("train-base", help="train the base-session backbone")
    p_base.add_argument("--config", required=True)
    p_base.add_argument("--out", default="run")
    p_base.add_argument("--plain", action="store_true", help="train without class augmentation")
    p_base.add_argument("--no-tfa", action="store_true")
    p_base.add_argument("--no-tva", action="store_true")

    p_inc = sub.add_parser("run-incremental", help="run incremental sessions from a trained base")
    p_inc.add_argument("--config", required=True)
    p_inc.add_argument("--out", default="run")
    _add_ablation_flags(p_inc)

    p_bl = sub.add_parser("baseline", help="run a baseline end to end on the prepared splits")
    p_bl.add_argument("--config", required=True)
    p_bl.add_argument("--out", default="run")
    p_bl.add_argument("--kind", required=True, choices=["finetune", "frozen", "frozen_projection"])

    p_rep = sub.add_parser("report", help="merge run reports into one plot CSV and a table")
    p_rep.add_argument("--inputs", nargs="+", required=True)
    p_rep.add_argument("--out", default="summary.csv")

    args = parser.parse_args(argv)

    if args.command == "report":
        reports = [load_report(p) for p in args.inputs]
        lines = ["session,method,accuracy"]
        for rep in reports:
            for entry in rep["sessions"]:
                lines.append(f"{entry['t']},{rep['method']},{entry['acc_all']!r}")
        Path(args.out).write_text("\n".join(lines) + "\n")
        print(f"{'method':<24}{'avg_acc':>10}{'pd':>10}{'last':>10}")
        for rep in reports:
            last = rep["sessions"][-1]["acc_all"]
            print(f"{rep['method']:<24}{rep['avg_acc']:>10.4f}{rep['pd']:>10.4f}{last:>10.4f}")
        print(f"merged CSV -> {args.out}")
        return 0

    raw = load_config(args.config)
    exp = parse_experiment(raw)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.command == "prepare-splits":
        _prepare(exp, raw, out)
    elif args.command == "train-base":
        if args.plain:
            spec = METHODS["finetune"]  # plain base: no augmentation branches
        else:
            spec = METHODS["tap"]
        base_cfg = exp.base
        if args.no_tfa:
            base_cfg = replace(base_cfg, use_tfa=False)
        if args.no_tva:
            base_cfg = replace(base_cfg, use_tva=False)
        _train_base(exp, out, spec, base_cfg)
    elif args.command == "run-incremental":
        _run_incremental(exp, out, args)
    elif args.command == "baseline":
        sessions, manifest = dataio.load_sessions(out / "splits")
        enc_cfg = exp.encoder_cfg(manifest["feature_dim"])
        base_result = None
        if (out / "base_plain" / "meta.json").exists():
            base_result = _load_base(out, "plain")
            print(f"reusing plain base checkpoint from {out / 'base_plain'}")
        summary = run_method(
            sessions, enc_cfg, exp.base, exp.incremental, METHODS[args.kind], exp.seed, exp.hash,
            base_result=base_result,
        )
        report_path = out / f"report_{args.kind}_{exp.seed}.json"
        emit_report(summary, report_path)
        emit_plot_data([summary], out / f"curves_{args.kind}_{exp.seed}.csv")
        print(f"{args.kind}: avg_acc={summary.avg_acc:.4f} pd={summary.pd:.4f}")
        print(f"report -> {report_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
