"""Train A0/A1/A2 from one shared base over several seeds and tabulate CAMI-U.

    python scripts/ablation.py --out runs/ablation --seeds 0,1,2
"""

import argparse
import json
import logging
import warnings
from pathlib import Path

import torch

from vdress import workflow
from vdress.config import load_run_config


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--config", default=None)
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--variants", default="A0,A1,A2")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    torch.set_num_threads(1)
    warnings.simplefilter("ignore", RuntimeWarning)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = workflow.ablate(load_run_config(args.config), out / "cache", args.variants.split(","),
                             [int(s) for s in args.seeds.split(",")], log_every=500)
    (out / "ablation.json").write_text(json.dumps(report, indent=2) + "\n")
    print(workflow.format_table(report))


if __name__ == "__main__":
    main()
