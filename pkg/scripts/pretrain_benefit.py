"""Rounds to a target accuracy with a pre-trained vs a random encoder (paired seeds).

    python scripts/pretrain_benefit.py --seeds 10 --rounds 60
"""

import argparse
from pathlib import Path

from fespit import config as cfgmod
from fespit.experiment import prepare_data
from fespit.federation import run_training

ROOT = Path(__file__).resolve().parents[1]


def rounds_to(cfg, threshold):
    prep = prepare_data(cfg)
    res = run_training(cfg.round, prep.private, cfg.partition, public=prep.public,
                       pretrain=cfg.pretrain, shards=prep.shards, dims=cfg.model)
    acc = [m.mean_test_accuracy for m in res.metrics]
    return next((t + 1 for t, a in enumerate(acc) if a >= threshold), len(acc) + 1)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=ROOT / "configs" / "desk.cfg")
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--rounds", type=int, default=60)
    ap.add_argument("--threshold", type=float, default=0.7)
    ap.add_argument("--epochs", type=int, default=None, help="override pretrain.epochs")
    args = ap.parse_args()

    base = cfgmod.with_overrides(cfgmod.load_config(args.config), **{"round.rounds": args.rounds})
    if args.epochs is not None:
        base = cfgmod.with_overrides(base, **{"pretrain.epochs": args.epochs})
    wins = 0
    print("seed  pretrained  random   (rounds; never reached = rounds + 1)")
    for seed in range(args.seeds):
        cfg = cfgmod.with_overrides(base, **{"run.seed": seed})
        a = rounds_to(cfg, args.threshold)
        b = rounds_to(cfgmod.with_overrides(cfg, **{"pretrain.enabled": False}), args.threshold)
        wins += a <= b
        print(f"{seed:4d}  {a:10d}  {b:6d}")
    print(f"pre-trained no slower in {wins}/{args.seeds} seeds")


if __name__ == "__main__":
    main()
