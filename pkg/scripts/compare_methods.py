"""FES-PIT vs FES-PTZO vs FedAvg on the desk-scale task, several seeds.

    python scripts/compare_methods.py --seeds 5 --out runs/compare

Writes ``summary.csv`` (one row per method and seed) and a per-round
``curves.csv`` with the mean test accuracy of every run.
"""

import argparse
import statistics
from pathlib import Path

from fespit import config as cfgmod
from fespit.experiment import prepare_data
from fespit.federation import fedavg_baseline, run_training

ROOT = Path(__file__).resolve().parents[1]

METHODS = {
    "FES-PIT": ("fes", "PIT"),
    "FES-PTZO": ("fes", "PTZO"),
    "FedAvg": ("fedavg", "PIT"),
}


def rounds_to(acc, threshold):
    return next((t + 1 for t, a in enumerate(acc) if a >= threshold), None)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=ROOT / "configs" / "desk.cfg")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--rounds", type=int, default=100)
    ap.add_argument("--threshold", type=float, default=0.9)
    ap.add_argument("--out", default="runs/compare")
    args = ap.parse_args()

    base = cfgmod.load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = ["method,seed,best_accuracy,final_accuracy,rounds_to_threshold"]
    curves = {}
    for name, (algorithm, option) in METHODS.items():
        finals = []
        for seed in range(args.seeds):
            cfg = cfgmod.with_overrides(base, **{"run.seed": seed, "round.option": option,
                                                 "round.rounds": args.rounds})
            prep = prepare_data(cfg)
            fn = run_training if algorithm == "fes" else fedavg_baseline
            res = fn(cfg.round, prep.private, cfg.partition, public=prep.public,
                     pretrain=cfg.pretrain, shards=prep.shards, dims=cfg.model)
            acc = [m.mean_test_accuracy for m in res.metrics]
            curves[f"{name}/seed{seed}"] = acc
            finals.append(acc[-1])
            hit = rounds_to(acc, args.threshold)
            summary.append(f"{name},{seed},{max(acc)!r},{acc[-1]!r},{'' if hit is None else hit}")
        print(f"{name:9s} median final accuracy {statistics.median(finals):.4f}")
    (out / "summary.csv").write_text("\n".join(summary) + "\n")
    names = list(curves)
    rows = ["round," + ",".join(names)]
    for t in range(args.rounds):
        rows.append(f"{t}," + ",".join(repr(curves[n][t]) for n in names))
    (out / "curves.csv").write_text("\n".join(rows) + "\n")
    print(f"wrote {out}/summary.csv and {out}/curves.csv")


if __name__ == "__main__":
    main()
