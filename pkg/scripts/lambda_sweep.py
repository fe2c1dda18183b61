"""Sweep the garment strength of a trained checkpoint and report CAMI-U per value.

    python scripts/lambda_sweep.py --ckpt runs/overfit/checkpoint --data runs/overfit/data/manifest.jsonl

Also writes one sample grid image (garment, model photo, one sample per
strength) for the first pair to ``--out``.
"""

import argparse
import json
import warnings
from pathlib import Path

import numpy as np
import torch

from vdress import checkpoint, workflow
from vdress.codec import save_png
from vdress.config import RunConfig
from vdress.data import load_pairs

LAMBDAS = (0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--ckpt", required=True)
    ap.add_argument("--data", required=True, help="manifest.jsonl")
    ap.add_argument("--out", default="runs/lambda_sweep")
    ap.add_argument("--seeds", default="1000,1001,1002")
    ap.add_argument("--scale", type=float, default=RunConfig().sampler.w)
    ap.add_argument("--steps", type=int, default=RunConfig().sampler.steps)
    args = ap.parse_args()
    torch.set_num_threads(1)
    warnings.simplefilter("ignore", RuntimeWarning)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, state = checkpoint.load_checkpoint(args.ckpt)
    schedule = (state.cfg if state is not None else RunConfig().train).schedule()
    pairs = load_pairs(args.data, per_garment=1)
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = []
    for lam in LAMBDAS:
        rep = workflow.sample_and_score(model, pairs, schedule, lam=lam, w=args.scale, steps=args.steps, seeds=seeds)
        rows.append({"lambda": lam, **{k: v for k, v in rep["means"].items() if k.startswith(("cami", "s_"))}})
        print(f"lambda {lam:4.2f}  cami_u {rows[-1]['cami_u']:.4f}")
    (out / "sweep.json").write_text(json.dumps(rows, indent=2) + "\n")

    p = pairs[0]
    tiles = [p.garment, p.model] + [
        workflow.sample_image(model, p.garment, p.caption, schedule=schedule, lam=lam, w=args.scale,
                              steps=args.steps, seed=seeds[0])
        for lam in LAMBDAS]
    save_png(np.concatenate(tiles, axis=2), out / "grid.png")


if __name__ == "__main__":
    main()
