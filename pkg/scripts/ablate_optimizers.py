"""Inner/outer optimizer grid over a few seeds; writes ablation.tsv and prints a mean table.

    python scripts/ablate_optimizers.py [--config configs/default.cfg] [--out runs/ablation]
"""

import argparse
import csv
from collections import defaultdict
from pathlib import Path

import numpy as np

from mamlicl import cli


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config")
    ap.add_argument("--out", default="runs/ablation")
    args = ap.parse_args()
    argv = ["ablate-optimizers", "--out", args.out] + (["--config", args.config] if args.config else [])
    if cli.main(argv):
        raise SystemExit(1)
    scores = defaultdict(list)
    with open(Path(args.out) / "ablation.tsv") as f:
        for row in csv.DictReader(f, delimiter="\t"):
            scores[row["setting"]].append(float(row["unseen_score"]))
    for setting, vals in scores.items():
        print(f"{setting:20s} unseen {np.nanmean(vals):.4f} over {len(vals)} seeds")


if __name__ == "__main__":
    main()
