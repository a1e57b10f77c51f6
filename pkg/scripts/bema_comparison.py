"""Paired comparison of best validation TVD with and without BEMA over seeds.

    python3 scripts/bema_comparison.py --seeds 16 --steps 6000
"""
import argparse

import numpy as np
from scipy import stats

from setcomplement.bema import BemaSpec, grid_specs
from setcomplement.training import TrainRunConfig, train_run

DESK = dict(v=8, s=3, d=7, d_k=4, d_v=7, peak_lr=1e-2, warmup_steps=1000, weight_decay=0.01,
            end_multiplier=0.01, batch_size=128, val_size=1024)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=16)
    ap.add_argument("--steps", type=int, default=6000)
    ap.add_argument("--val-interval", type=int, default=1000)
    ap.add_argument("--grid", action="store_true", help="use the full 10x10 BEMA grid instead of (10, 0.5, 0.5)")
    args = ap.parse_args()

    specs = grid_specs(10.0) if args.grid else [BemaSpec(10, 0.5, 0.5)]
    train, bema = [], []
    for seed in range(args.seeds):
        cfg = TrainRunConfig(**DESK, max_steps=args.steps, val_interval=args.val_interval, seed=seed, bema=specs)
        rec = train_run(cfg)
        train.append(rec.best["train"]["tvd"])
        bema.append(rec.best["bema"]["tvd"])
        print(f"seed {seed:>2}: train {train[-1]:.4f}  bema {bema[-1]:.4f}")
    train, bema = np.array(train), np.array(bema)
    wins, losses = int(np.sum(bema < train)), int(np.sum(bema > train))
    p = stats.binomtest(wins, wins + losses).pvalue if wins + losses else 1.0
    print(f"mean best TVD: train {train.mean():.4f}, bema {bema.mean():.4f}")
    print(f"BEMA better on {wins}, worse on {losses} of {args.seeds} seeds; sign test p = {p:.3g}")


if __name__ == "__main__":
    main()
