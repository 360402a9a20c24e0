"""Command line entry point: ``refinelab {run,rates,gap,plot,validate}``.

Exit codes: 0 success, 1 validation error, 2 some cells failed, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .experiment import (
    ConfigError,
    emit_plot_data,
    load_config,
    load_results,
    run_experiment,
    run_rates,
)

EXIT_OK, EXIT_INVALID, EXIT_PARTIAL, EXIT_IO = 0, 1, 2, 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="refinelab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress per cell")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, need_config=True):
        p.add_argument("--config", required=need_config, help="experiment config (JSON)")
        p.add_argument("--out", help="output directory (overrides the config's out_dir)")

    for name, text in [("run", "execute every missing cell of the grid"),
                       ("rates", "run, then report log-log slopes per estimator"),
                       ("gap", "run, then report the negative-transfer gap")]:
        p = sub.add_parser(name, help=text)
        common(p)
        p.add_argument("--workers", type=int, default=1, help="worker processes")
        p.add_argument("--seed-offset", type=int, default=0, help="added to every config seed")

    p = sub.add_parser("plot", help="emit plot data from an existing results directory")
    common(p, need_config=False)
    p.add_argument("--format", choices=["csv", "svg"], default="csv")

    p = sub.add_parser("validate", help="check a config without running anything")
    common(p)
    return parser


def _print_rates(results):
    for s in results["summaries"]["rates"]:
        fit = s["fit"]
        slope = "n/a" if fit is None else f"{fit['slope']:+.3f}"
        print(f"{s['task']:<24} {s['estimator']:<16} slope {slope}")
        for r in s["table"]:
            print(f"    n={r['n']:<7d} risk {r['risk_mean']:.4e} +/- {r['risk_stderr']:.1e}")


def _print_gap(results):
    gap = results["summaries"]["gap"]
    if gap is None:
        print("gap: config lacks a unique refine/scratch/probe estimator (set \"gap\")")
        return
    for block in gap:
        if not block["complete"]:
            print(f"n={block['n']}: incomplete grid")
            continue
        print(f"n={block['n']}: mean gap {block['mean_gap']:+.3e}, "
              f"positive in {block['frac_positive']:.0%} of cells")
        for t in block["tasks"]:
            print(f"    {t['task']:<24} refine {t['refine']:.3e} scratch {t['scratch']:.3e} "
                  f"probe {t['probe']:.3e} gap {t['gap']:+.3e}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "plot":
            out = args.out
            if out is None:
                if args.config is None:
                    raise ConfigError("plot needs --out or --config")
                out = load_config(args.config).out_dir
            paths = emit_plot_data(load_results(out), args.format, out)
            for p in paths:
                print(p)
            return EXIT_OK

        cfg = load_config(args.config)
        if args.command == "validate":
            print(json.dumps({"valid": True, "config_hash": cfg.config_hash,
                              "cells": len(cfg.task_ids()) * len(cfg.estimators)
                              * len(cfg.n_grid) * len(cfg.seeds)}))
            return EXIT_OK
        base = Path(args.config).parent
        kw = dict(out_dir=args.out, workers=args.workers, seed_offset=args.seed_offset, base=base)
        report = run_rates(cfg, **kw) if args.command == "rates" else run_experiment(cfg, **kw)
        print(f"{len(report.executed)} cells run, {len(report.skipped)} cached, "
              f"{len(report.failed)} failed -> {report.out_dir / 'results.json'}")
        if args.command == "rates":
            _print_rates(report.results)
        elif args.command == "gap":
            _print_gap(report.results)
        return report.exit_code
    except ConfigError as e:
        print(f"invalid config: {e}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
