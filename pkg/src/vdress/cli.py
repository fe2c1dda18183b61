"""Command line: ``vdress {synth-data,train,ablate,sample,eval,inspect}``.

Exit codes: 0 success, 1 I/O failure, 2 usage or validation error,
3 numeric failure (non-finite loss).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import checkpoint, workflow
from .cami import evaluate_corpus, num_workers, write_report
from .codec import save_png
from .config import RunConfig, load_run_config
from .data import load_pairs, load_rgb, synth_pairs
from .errors import (CheckpointError, ConfigError, DimensionError, IntegrityError, NumericError, ParseError,
                     PipelineError, ValidationError)
from .unet import LAMBDA_RANGE

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3
LAMBDA_GRID = (0.0, 0.25, 0.5, 0.75, 1.0, 1.5)
_DEFAULTS = RunConfig()

log = logging.getLogger("vdress")


class UsageError(Exception):
    pass


def _lambda(text: str) -> float:
    try:
        lam = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}")
    lo, hi = LAMBDA_RANGE
    if not lo <= lam <= hi:
        raise argparse.ArgumentTypeError(f"garment strength must lie in [{lo}, {hi}], got {lam}")
    return lam


def _positive(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Shows defaults, except for required options and config-backed flags that default to None."""

    def _get_help_string(self, action):
        if action.default is None or action.required:
            return action.help
        return super()._get_help_string(action)


def build_parser() -> argparse.ArgumentParser:
    d = _DEFAULTS
    fmt = _HelpFormatter
    p = argparse.ArgumentParser(prog="vdress", description="Garment-conditioned latent diffusion at desk scale.",
                                formatter_class=fmt)
    p.add_argument("-v", "--verbose", action="store_true", default=False, help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", help="write a synthetic paired dataset", formatter_class=fmt)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--pairs", type=_positive, default=d.data.pairs, help="number of garments")
    s.add_argument("--seed", type=int, default=d.data.seed, help="generator seed")

    def run_flags(q, steps=True):
        q.add_argument("--config", default=None, help="JSON run config; flags override its values")
        if steps:
            q.add_argument("--steps", type=_positive, default=None,
                           help=f"adapter training steps (config: train.steps, default {d.train.steps})")
        q.add_argument("--seed", type=int, default=None, help=f"training seed (default {d.train.seed})")
        q.add_argument("--workdir", default=None,
                       help="cache for the pretrained base (train: <out>_cache, ablate: <out>/cache)")

    t = sub.add_parser("train", help="pretrain the base if needed, then train the garment branch", formatter_class=fmt)
    run_flags(t)
    t.add_argument("--data", default=None, help="manifest.jsonl; synthesised from the data config when omitted")
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.add_argument("--resume", default=None, help="continue from this checkpoint")
    t.add_argument("--variant", choices=("A0", "A1", "A2"), default=None,
                   help=f"ablation arm (default {d.model.variant})")
    t.add_argument("--log-every", type=int, default=100, help="log period in steps")

    a = sub.add_parser("ablate", help="train and score each ablation arm", formatter_class=fmt)
    run_flags(a)
    a.add_argument("--variants", default="A0,A1,A2", help="comma-separated variants")
    a.add_argument("--seeds", default="0", help="comma-separated training seeds")
    a.add_argument("--out", required=True, help="report directory")

    sm = sub.add_parser("sample", help="sample a dressed image for a garment", formatter_class=fmt)
    sm.add_argument("--ckpt", required=True, help="checkpoint directory")
    sm.add_argument("--garment", required=True, help="garment PNG")
    sm.add_argument("--prompt", default="a person", help="text prompt")
    sm.add_argument("--lambda", dest="lam", type=_lambda, default=d.sampler.lam, help="garment strength in [0, 1.5]")
    sm.add_argument("--scale", type=float, default=d.sampler.w, help="guidance scale w")
    sm.add_argument("--steps", type=_positive, default=d.sampler.steps, help="sampling steps")
    sm.add_argument("--seed", type=int, default=d.sampler.seed, help="sampling seed")
    sm.add_argument("--grid", action="store_true", default=False,
                    help=f"sweep the garment strength over {list(LAMBDA_GRID)}")
    sm.add_argument("--out", required=True, help="output PNG (grid mode: directory)")

    e = sub.add_parser("eval", help="score generated images against their garments", formatter_class=fmt)
    e.add_argument("--ckpt", default=None, help="sample from this checkpoint; otherwise score the dataset's model images")
    e.add_argument("--data", required=True, help="manifest.jsonl")
    e.add_argument("--metrics", choices=("cami-u", "cami-s"), default=d.eval.metric, help="metric")
    e.add_argument("--report", required=True, help="output JSON report")
    e.add_argument("--seeds", default=",".join(map(str, d.eval.seeds)), help="sampling seeds (with --ckpt)")
    e.add_argument("--steps", type=_positive, default=d.sampler.steps, help="sampling steps (with --ckpt)")
    e.add_argument("--scale", type=float, default=d.sampler.w, help="guidance scale (with --ckpt)")
    e.add_argument("--lambda", dest="lam", type=_lambda, default=d.sampler.lam, help="garment strength (with --ckpt)")
    e.add_argument("--per-garment", type=_positive, default=d.data.per_garment, help="model images per garment")

    i = sub.add_parser("inspect", help="print a checkpoint's configuration and parameter partition",
                       formatter_class=fmt)
    i.add_argument("--ckpt", required=True, help="checkpoint directory")
    return p


# commands


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}")


def _run_config(args, **extra) -> RunConfig:
    cfg = load_run_config(args.config)
    over = {"train.steps": getattr(args, "steps", None), "train.seed": args.seed}
    over.update(extra)
    return cfg.override(over)


def cmd_synth_data(args) -> int:
    path = synth_pairs(args.pairs, args.seed, args.out)
    print(f"wrote {args.pairs} records to {path}")
    return EXIT_OK


def cmd_train(args) -> int:
    out = Path(args.out)
    cfg = _run_config(args, **{"model.variant": args.variant})
    workdir = Path(args.workdir) if args.workdir else out.parent / (out.name + "_cache")
    if args.data:
        manifest = Path(args.data)
    else:
        manifest = synth_pairs(cfg.data.pairs, cfg.data.seed, workdir / f"train_data_{cfg.data.seed}")
    pairs = load_pairs(manifest, per_garment=cfg.data.per_garment)
    if args.resume:
        model, state = checkpoint.load_checkpoint(args.resume, expect_config=cfg.model)
        if state is None:
            raise UsageError(f"{args.resume} holds no training state")
        if replace(state.cfg, steps=cfg.train.steps) != cfg.train:
            raise ConfigError("resume config differs from the checkpoint's training config")
        state.cfg = cfg.train
    else:
        base = workflow.base_model(cfg, workdir, args.log_every * 10)
        model = workflow.variant_model(cfg, base)
        state = None
    state = workflow.train_adapter(model, pairs, cfg.train, state=state, log_every=args.log_every)
    checkpoint.save_checkpoint(model, state, out)
    tail = np.mean(state.losses[-50:]) if state.losses else float("nan")
    print(f"step {state.step} loss(ma50) {tail:.5f} -> {out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _run_config(args)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    if not variants or any(v not in ("A0", "A1", "A2") for v in variants):
        raise UsageError(f"variants must be drawn from A0,A1,A2, got {args.variants!r}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = workflow.ablate(cfg, Path(args.workdir) if args.workdir else out / "cache", variants,
                             _int_list(args.seeds), log_every=100 if args.verbose else 0)
    (out / "ablation.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    print(workflow.format_table(report))
    return EXIT_OK


def _schedule_for(state):
    return (state.cfg if state is not None else _DEFAULTS.train).schedule()


def cmd_sample(args) -> int:
    model, state = checkpoint.load_checkpoint(args.ckpt)
    schedule = _schedule_for(state)
    garment = load_rgb(args.garment)
    if garment.shape[1:] != tuple(8 * s for s in model.cfg.latent_shape[1:]) and model.codec_cfg.factor == 8:
        raise UsageError(f"garment image {garment.shape[1:]} does not match the model resolution")
    lams = LAMBDA_GRID if args.grid else (args.lam,)
    out = Path(args.out)
    if args.grid:
        out.mkdir(parents=True, exist_ok=True)
    for lam in lams:
        img = workflow.sample_image(model, garment, args.prompt, schedule=schedule, lam=lam, w=args.scale,
                                    steps=args.steps, seed=args.seed)
        path = out / f"lambda_{lam:.2f}.png" if args.grid else out
        save_png(img, path)
        print(path)
    return EXIT_OK


def cmd_eval(args) -> int:
    pairs = load_pairs(args.data, per_garment=args.per_garment)
    if args.ckpt:
        model, state = checkpoint.load_checkpoint(args.ckpt)
        report = workflow.sample_and_score(model, pairs, _schedule_for(state), lam=args.lam, w=args.scale,
                                           steps=args.steps, seeds=_int_list(args.seeds), metric=args.metrics)
    else:
        evals = [workflow.eval_pair(p, p.model, keypoints_gen=p.keypoints, prompt=p.caption or None) for p in pairs]
        report = evaluate_corpus(evals, args.metrics)
    write_report(report, args.report)
    m = report["means"]
    print(f"{args.metrics}: cami_u={m['cami_u']} cami_s={m['cami_s']} over {len(report['pairs'])} pairs -> {args.report}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    meta = checkpoint.read_meta(args.ckpt)
    model, state = checkpoint.load_checkpoint(args.ckpt)
    from .training import partition_parameters

    part = state.partition if state is not None else partition_parameters(model)
    info = {
        "model_config": meta["model_config"],
        "step": meta["step"],
        "sites": meta["partition"]["sites"],
        "counts": part.counts(),
        "trainable": sorted(part.trainable),
        "frozen": sorted(part.frozen),
    }
    print(json.dumps(info, indent=1))
    return EXIT_OK


COMMANDS = {
    "synth-data": cmd_synth_data, "train": cmd_train, "ablate": cmd_ablate,
    "sample": cmd_sample, "eval": cmd_eval, "inspect": cmd_inspect,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(num_workers())
    try:
        return COMMANDS[args.command](args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, ValidationError, ParseError, DimensionError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, CheckpointError, IntegrityError, PipelineError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
