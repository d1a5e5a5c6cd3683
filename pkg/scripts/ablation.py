"""Hyper-parameter ablations: local steps K, client count M, and fedround.

    python scripts/ablation.py --axis fedround --values 5,20,50 --seeds 3

Each (value, seed) run goes to ``<out>/seed<s>/<axis>=<value>/`` with the
usual run files; ``<out>/<axis>_summary.csv`` collects best/final accuracy and
rounds to a threshold.
"""

import argparse
import statistics
from pathlib import Path

from fespit import config as cfgmod
from fespit.experiment import SWEEP_AXES, sweep

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=ROOT / "configs" / "desk.cfg")
    ap.add_argument("--axis", choices=sorted(SWEEP_AXES), default="fedround")
    ap.add_argument("--values", default="5,20,50")
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--rounds", type=int, default=100)
    ap.add_argument("--threshold", type=float, default=0.85)
    ap.add_argument("--out", default="runs/ablation")
    args = ap.parse_args()

    values = [v.strip() for v in args.values.split(",") if v.strip()]
    base = cfgmod.with_overrides(cfgmod.load_config(args.config), **{"round.rounds": args.rounds})
    out = Path(args.out)
    rows = [f"{args.axis},seed,best_accuracy,final_accuracy,rounds_to_threshold"]
    hits = {v: [] for v in values}
    for seed in range(args.seeds):
        cfg = cfgmod.with_overrides(base, **{"run.seed": seed})
        results = sweep(cfg, args.axis, values, out / f"seed{seed}")
        for value, res in results.items():
            acc = [m.mean_test_accuracy for m in res.metrics]
            hit = next((t + 1 for t, a in enumerate(acc) if a >= args.threshold), len(acc) + 1)
            hits[value].append(hit)
            rows.append(f"{value},{seed},{max(acc)!r},{acc[-1]!r},{hit}")
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{args.axis}_summary.csv").write_text("\n".join(rows) + "\n")
    for value in values:
        print(f"{args.axis}={value}: median rounds to {args.threshold} = "
              f"{statistics.median(hits[value])} (never reached counts as {args.rounds + 1})")


if __name__ == "__main__":
    main()
