"""Pretrain on shift-pair, then compare full vs adapter finetuning on its realish twin."""

import argparse
import json

import numpy as np

from pmvad.experiments import preset_train_config, scenario, transfer
from pmvad.model import train
from pmvad.presets import get_preset


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--few-shot", type=float, default=0.2)
    ap.add_argument("--epochs", type=int, default=3)
    ap.add_argument("--max-steps", type=int, default=None)
    args = ap.parse_args()
    twin = get_preset("shift-pair").twin
    by_mode = {}
    for seed in args.seeds:
        frames, man = scenario("shift-pair", seed)
        pre, _ = train(frames, man, preset_train_config("shift-pair", seed))
        tf, tm = scenario(twin, seed)
        rows, _ = transfer(pre, tf, tm, args.few_shot, args.epochs, args.max_steps)
        for r in rows:
            print(json.dumps({"seed": seed, **vars(r)}), flush=True)
            by_mode.setdefault(r.mode, []).append((r.auc, r.seconds))
    for mode, vals in by_mode.items():
        a, s = np.mean(vals, axis=0)
        print(f"{mode:10s} auc {a:.3f}  seconds {s:.1f}")


if __name__ == "__main__":
    main()
