"""Command line entry point: ``fespit run|sweep|probe|check``.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import config as cfgmod
from .errors import ConfigError
from .experiment import SWEEP_AXES, probe_only, run_experiment, sweep
from .selfcheck import run_checks

log = logging.getLogger("fespit")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # bad command line counts as a configuration error
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _parser():
    p = _Parser(prog="fespit", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, with_config=True):
        if with_config:
            sp.add_argument("config", help="flat key=value config file")
        sp.add_argument("--seed", type=int, default=None, help="override run.seed")
        sp.add_argument("--out", default=None, help="override run.out")
        sp.add_argument("--quiet", action="store_true")

    common(sub.add_parser("run", help="train one configuration"))
    sp = sub.add_parser("sweep", help="one run per value of a hyper-parameter")
    common(sp)
    sp.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    sp.add_argument("--values", required=True, help="comma-separated values")
    common(sub.add_parser("probe", help="partition + heterogeneity probes, no training"))
    common(sub.add_parser("check", help="run the built-in oracle self-tests"), with_config=False)
    return p


def _load(args):
    cfg = cfgmod.load_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["run.seed"] = args.seed
    if args.out is not None:
        overrides["run.out"] = args.out
    return cfgmod.with_overrides(cfg, **overrides) if overrides else cfg


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s")
    echo = (lambda s: None) if args.quiet else print
    try:
        if args.command == "check":
            return 0 if run_checks(print) else 2
        cfg = _load(args)
        if args.command == "run":
            res = run_experiment(cfg, quiet=args.quiet)
            last = res.metrics[-1] if res.metrics else None
            echo(f"wrote {cfg.out}"
                 + (f"  final mean test accuracy {last.mean_test_accuracy:.4f}" if last else ""))
        elif args.command == "sweep":
            values = [v.strip() for v in args.values.split(",") if v.strip()]
            results = sweep(cfg, args.axis, values, quiet=args.quiet)
            for value, res in results.items():
                acc = res.metrics[-1].mean_test_accuracy if res.metrics else float("nan")
                echo(f"{args.axis}={value}  final mean test accuracy {acc:.4f}")
        elif args.command == "probe":
            summary = probe_only(cfg)
            echo("  ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}"
                           for k, v in summary.items()))
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
