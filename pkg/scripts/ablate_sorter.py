"""Memory x window ablation on the sorter preset, logic subset, several seeds.

    python3 scripts/ablate_sorter.py --seeds 0 1 2 [--set memory_axis=row]
"""

import argparse
import json

import numpy as np

from pmvad.config import parse_overrides
from pmvad.experiments import ablation


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--preset", default="sorter-64")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--family", default="logic")
    ap.add_argument("--set", action="append", default=[], help="train override, e.g. memory_axis=row")
    args = ap.parse_args()
    overrides = parse_overrides(args.set)
    table = {}
    for seed in args.seeds:
        for row in ablation(args.preset, seed, args.family, **overrides):
            key = ("mem" if row["memory"] else "nomem") + ("+win" if row["window"] else "")
            table.setdefault(key, []).append(row[f"auc_{args.family}"])
            print(json.dumps({"seed": seed, "row": key, **row}), flush=True)
    print("mean over seeds:")
    for key, vals in table.items():
        print(f"  {key:10s} {np.mean(vals):.3f}  {np.round(vals, 3).tolist()}")


if __name__ == "__main__":
    main()
