"""Command-line entry point.

Subcommands: synth, pretrain, probe, ablate, sweep, viz, grad-check, and
manifest (plain-text dataset inspection). Exit codes: 0 success, 1 usage
error, 2 runtime failure. Output files land in --out or $CSIMASK_OUT
(default: current directory).
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checks import run_gradient_checks
from .core.errors import CsimaskError
from .core.tensor import Tensor, no_grad
from .data import (
    CsiDataset,
    SynthConfig,
    preprocess,
    read_dataset,
    stratified_split,
    synth_generate,
    write_dataset,
)
from .evaluate import AblationVariant, ProbeConfig, ablation_run, probe_pretrained
from .masking import gumbel_topk_partition, patch_tokens, policy_probs
from .backbone import pixel_error_map
from .alignment import cross_correlation, project_and_normalize
from .trainer import MetricsLog, PretrainState, TrainConfig, load_config, pretrain_run, save_config
from .visualize import VIZ_KINDS, emit_visualization


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _out_dir(args) -> Path:
    out = Path(getattr(args, "out", None) or os.environ.get("CSIMASK_OUT", "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_train_config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    overrides = {}
    for name in ("epochs", "batch_size", "lr", "seed"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    return replace(cfg, **overrides) if overrides else cfg


def _prepped(path) -> CsiDataset:
    ds = read_dataset(path)
    return preprocess(ds) if ds.manifest.normalization == "raw" else ds


def build_parser() -> _Parser:
    parser = _Parser(prog="csimask", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset file")
    p.add_argument("--out-file", required=True)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--antennas", type=int, default=3)
    p.add_argument("--subcarriers", type=int, default=30)
    p.add_argument("--timesteps", type=int, default=200)
    p.add_argument("--background-sigma", type=float, default=0.02)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("manifest", help="print a dataset manifest as text")
    p.add_argument("data")

    p = sub.add_parser("pretrain", help="run pre-training on a dataset file")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)

    p = sub.add_parser("probe", help="k-shot linear probe of a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--probe-epochs", type=int, default=100)
    p.add_argument("--probe-lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)

    p = sub.add_parser("ablate", help="run the five-variant ablation matrix")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--probe-epochs", type=int, default=100)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)

    p = sub.add_parser("sweep", help="grid sweep over one hyperparameter")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument(
        "--param",
        required=True,
        choices=("mask-ratio", "bt-weight", "policy-dim", "bt-width"),
    )
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--probe-epochs", type=int, default=100)
    p.add_argument("--out", default=None)

    p = sub.add_parser("viz", help="emit visualization data files")
    p.add_argument("--kind", required=True, choices=VIZ_KINDS)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sample", type=int, default=0)
    p.add_argument("--out", default=None)

    p = sub.add_parser("grad-check", help="finite-difference check every primitive")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("write-config", help="write a default config file")
    p.add_argument("--out-file", required=True)
    return parser


def _cmd_synth(args) -> int:
    cfg = SynthConfig(
        n_classes=args.classes,
        per_class=args.per_class,
        n_antennas=args.antennas,
        n_subcarriers=args.subcarriers,
        n_timesteps=args.timesteps,
        background_sigma=args.background_sigma,
    )
    ds = synth_generate(cfg, args.seed)
    write_dataset(ds, args.out_file)
    print(f"wrote {len(ds)} samples to {args.out_file}")
    return 0


def _cmd_manifest(args) -> int:
    print(read_dataset(args.data).manifest.describe())
    return 0


def _cmd_pretrain(args) -> int:
    cfg = _load_train_config(args)
    ds = _prepped(args.data)
    out = _out_dir(args)
    split = stratified_split(ds.labels, 0.8, cfg.seed)
    result = pretrain_run(ds.amplitude[split.train], ds.phase[split.train], cfg)
    result.state.save(out / "checkpoint.csck")
    result.log.write(out / "metrics.csv")
    save_config(cfg, out / "config.txt")
    print(f"pre-trained {cfg.epochs} epochs; checkpoint and metrics in {out}")
    return 0


def _cmd_probe(args) -> int:
    state = PretrainState.load(args.checkpoint)
    ds = _prepped(args.data)
    split = stratified_split(ds.labels, 0.8, state.cfg.seed)
    probe_cfg = ProbeConfig(k=args.k, epochs=args.probe_epochs, lr=args.probe_lr, seed=args.seed)
    report = probe_pretrained(state, ds, split, probe_cfg)
    out = _out_dir(args)
    (out / "probe_report.csv").write_text(report.to_csv())
    print(report.summary())
    return 0


def _cmd_ablate(args) -> int:
    base = _load_train_config(args)
    ds = read_dataset(args.data)
    probe_cfg = ProbeConfig(k=args.k, epochs=args.probe_epochs, seed=base.seed)
    out = _out_dir(args)
    for variant in AblationVariant:
        report = ablation_run(ds, base, variant, probe_cfg, epochs=args.epochs)
        (out / f"ablation_{variant.value}.csv").write_text(report.to_csv())
        print(report.summary())
    return 0


def _cmd_sweep(args) -> int:
    base = _load_train_config(args)
    ds = read_dataset(args.data)
    probe_cfg = ProbeConfig(k=args.k, epochs=args.probe_epochs, seed=base.seed)
    field = {
        "mask-ratio": "rho",
        "bt-weight": "w_bt",
        "policy-dim": "d_policy",
        "bt-width": "bt_width",
    }[args.param]
    out = _out_dir(args)
    for raw in args.values.split(","):
        value = float(raw) if field in ("rho", "w_bt") else int(raw)
        cfg = replace(base, **{field: value})
        report = ablation_run(ds, cfg, AblationVariant.FULL, probe_cfg, epochs=args.epochs)
        report.variant = f"{args.param}={raw}"
        (out / f"sweep_{args.param}_{raw}.csv").write_text(report.to_csv())
        print(report.summary())
    return 0


def _cmd_viz(args) -> int:
    state = PretrainState.load(args.checkpoint)
    ds = _prepped(args.data)
    out = _out_dir(args)
    i = args.sample
    amp = ds.amplitude[i : i + 16].astype(np.float32)
    pha = ds.phase[i : i + 16].astype(np.float32)
    if args.kind == "error-heatmap":
        with no_grad():
            xhat = state.decoders["amplitude"](state.encoders["amplitude"](Tensor(amp)))
        files = emit_visualization("error-heatmap", pixel_error_map(xhat, amp), out / "heatmap")
    elif args.kind == "mask-overlay":
        policy = state.policies.get("amplitude")
        if policy is None:
            raise CsimaskError("checkpoint was trained without a masking policy")
        conv_w, conv_b, kernel = state.encoders["amplitude"].convs[0]
        tokens = patch_tokens(amp[:1], conv_w, conv_b, kernel, state.grid, policy)
        probs = policy_probs(tokens, policy).data[0]
        part = gumbel_topk_partition(probs, state.cfg.rho, state.grid, deterministic=True)
        files = emit_visualization("mask-overlay", part, out / "mask_overlay")
    else:
        with no_grad():
            za = state.encoders["amplitude"](Tensor(amp))
            zp = state.encoders["phase"](Tensor(pha))
            pa, pp = project_and_normalize(
                za, zp, state.heads["amplitude"], state.heads["phase"]
            )
            corr = cross_correlation(pa, pp).data
        files = emit_visualization("corr-matrix", corr, out / "corr_matrix", crop=64)
    print("wrote " + ", ".join(str(f) for f in files))
    return 0


def _cmd_grad_check(args) -> int:
    start = time.monotonic()
    results = run_gradient_checks(seed=args.seed)
    failed = [r for r in results if not r.passed]
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:<30} max rel err {r.max_rel_error:.3e}  [{status}]")
    print(f"{len(results) - len(failed)}/{len(results)} checks passed "
          f"in {time.monotonic() - start:.1f}s")
    return 0 if not failed else 2


def _cmd_write_config(args) -> int:
    save_config(TrainConfig(), args.out_file)
    print(f"wrote defaults to {args.out_file}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "manifest": _cmd_manifest,
    "pretrain": _cmd_pretrain,
    "probe": _cmd_probe,
    "ablate": _cmd_ablate,
    "sweep": _cmd_sweep,
    "viz": _cmd_viz,
    "grad-check": _cmd_grad_check,
    "write-config": _cmd_write_config,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except (CsimaskError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
