"""Overfit loss ratio for several (beta_start, beta_end, learning_rate) settings.

    python scripts/schedule_sweep.py --out runs/schedules

Each setting pretrains (or reuses) its own base, trains the adapter on 8
pairs without condition dropout and reports final / step-0 loss.
"""

import argparse
import json
import time
from pathlib import Path

import numpy as np
import torch

from vdress import workflow
from vdress.config import RunConfig
from vdress.data import load_pairs, synth_pairs

SETTINGS = [
    (1e-4, 0.02, 1e-3),
    (1e-3, 0.2, 1e-3),
    (0.02, 0.2, 1e-3),
    (0.05, 0.2, 1e-3),
    (0.02, 0.3, 1e-3),
    (0.05, 0.2, 5e-5),
]


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/schedules")
    ap.add_argument("--steps", type=int, default=2000)
    args = ap.parse_args()
    torch.set_num_threads(1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pairs = load_pairs(synth_pairs(8, 0, out / "data"), per_garment=1)
    rows = []
    for bs, be, lr in SETTINGS:
        cfg = RunConfig().override({"train.beta_start": bs, "train.beta_end": be, "train.learning_rate": lr,
                                    "train.p_drop": 0.0, "train.steps": args.steps})
        t0 = time.time()
        model = workflow.variant_model(cfg, workflow.base_model(cfg, out / "cache"))
        initial = workflow.step0_loss(model, pairs, cfg.train)
        state = workflow.train_adapter(model, pairs, cfg.train)
        final = float(np.mean(state.losses[-50:]))
        rows.append({"beta_start": bs, "beta_end": be, "learning_rate": lr, "initial": initial, "final": final,
                     "ratio": final / initial, "alpha_bar_T": float(cfg.train.schedule().alpha_bar[-1]),
                     "seconds": time.time() - t0})
        print(f"beta {bs:g}..{be:g} lr {lr:g}: ratio {final / initial:.4f}", flush=True)
    (out / "sweep.json").write_text(json.dumps(rows, indent=2) + "\n")


if __name__ == "__main__":
    main()
