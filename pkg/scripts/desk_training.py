"""Train the desk-scale model (v=8, s=3) and print its validation history.

    python3 scripts/desk_training.py --steps 50000 --out runs/desk
"""
import argparse
import json
from pathlib import Path

from setcomplement.bema import BemaSpec
from setcomplement.model import save_checkpoint
from setcomplement.training import Trainer, TrainRunConfig, train_run

DESK = dict(v=8, s=3, d=7, d_k=4, d_v=7, peak_lr=1e-2, warmup_steps=1000, beta1=0.9, beta2=0.999,
            weight_decay=0.01, end_multiplier=0.01, batch_size=128, val_size=1024)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=50_000)
    ap.add_argument("--val-interval", type=int, default=10_000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()

    cfg = TrainRunConfig(**DESK, max_steps=args.steps, val_interval=args.val_interval, seed=args.seed,
                         bema=[BemaSpec(10, 0.5, 0.5)])
    trainer = Trainer(cfg)

    def show(event):
        tr = event["train"]
        bm = next(iter(event["bema"].values()))
        print(f"step {event['step']:>7}  loss {event['loss'] or float('nan'):.4f}  "
              f"TVD {tr['tvd']:.4f} ITP {tr['itp']:.4f} ITR {tr['itr']:.4f} ITP_s {tr['itp_s']:.4f}  "
              f"| BEMA TVD {bm['tvd']:.4f}  ({event['wall_clock']:.0f}s)")

    record = train_run(cfg, sink=show, trainer=trainer)
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "record.json").write_text(record.to_json() + "\n")
        save_checkpoint(args.out / "train.ckpt", trainer.params(), seed=args.seed, step=trainer.step_count)
    print(json.dumps(record.best["train"], indent=2))


if __name__ == "__main__":
    main()
