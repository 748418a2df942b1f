"""Sweep the training-data ablation and print seen/unseen accuracy per (method, proportion).

    python3 scripts/run_ablation.py [--config configs/synthetic.yaml] [--methods CLASS_EXCLUSIVE ...]
"""

import argparse
import csv
from pathlib import Path

import torch

from projgen.config import load_config
from projgen.pipeline import Pipeline

REPO = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(REPO / "configs" / "synthetic.yaml"))
    ap.add_argument("--output-dir")
    ap.add_argument("--methods", nargs="+")
    ap.add_argument("--proportions", nargs="+", type=float)
    args = ap.parse_args()

    torch.set_num_threads(1)
    cfg = load_config(args.config)
    if args.methods:
        cfg.ablation.methods = args.methods
    if args.proportions:
        cfg.ablation.proportions = args.proportions
    pipe = Pipeline(cfg, args.output_dir)
    for stage in ("ingest", "label-split", "build-prompts", "ablate"):
        print(f"{stage}: {pipe.run_stage(stage)}")

    rows = list(csv.DictReader((pipe.dir / "ablate" / "curve.csv").open()))
    print(f"\n{'method':<18}{'prop':>6}{'samples':>9}{'labels':>8}{'seen':>7}{'unseen':>8}")
    for r in rows:
        print(f"{r['method']:<18}{float(r['proportion']):>6.2f}{r['n_samples']:>9}{r['n_labels']:>8}"
              f"{r['seen_acc']:>7}{r['unseen_acc']:>8}")


if __name__ == "__main__":
    main()
