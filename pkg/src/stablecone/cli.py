"""Command-line entry point: one subcommand per experiment kind, plus plot-data.

Examples
--------
    stablecone survival --config survival.json --out-dir out/ --threads 4
    stablecone kernel-verify --config kv.json --assert
    stablecone plot-data --manifest out/manifest.json --which survival
"""
from __future__ import annotations

import argparse
import json
import sys

from .experiments import (EXPERIMENTS, PLOT_KINDS, ConfigError, ExperimentError, RunManifest,
                          emit_plot_data, load_config, run_experiment)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stablecone",
                                description="Stable random walks in cones: experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        s = sub.add_parser(name, help=f"run the {name} experiment")
        s.add_argument("--config", required=True, help="JSON configuration file")
        s.add_argument("--out-dir", default=None,
                       help="output directory (default: $STABLECONE_OUT_DIR/<name>-<digest>)")
        s.add_argument("--threads", type=int, default=None, help="worker threads")
        s.add_argument("--seed", type=int, default=None, help="override the master seed")
        s.add_argument("--assert", dest="assert_mode", action="store_true",
                       help="exit with status 1 if any configured check fails")
    s = sub.add_parser("plot-data", help="emit plot-ready CSVs from a finished run")
    s.add_argument("--manifest", required=True, help="manifest.json or its directory")
    s.add_argument("--which", required=True, choices=PLOT_KINDS)
    s.add_argument("--out-dir", default=None)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "plot-data":
        try:
            files = emit_plot_data(RunManifest.read(args.manifest), args.which, args.out_dir)
        except (FileNotFoundError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        for f in files:
            print(f)
        return 0
    try:
        cfg = load_config(args.config)
        if cfg.experiment != args.command:
            raise ConfigError(f"config is for experiment {cfg.experiment!r}, "
                              f"not {args.command!r}", path=["experiment"])
        if args.seed is not None:
            cfg = cfg.with_overrides(seed=args.seed)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        man = run_experiment(cfg, args.out_dir, args.threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ExperimentError as exc:
        print(f"experiment failed: {json.dumps(exc.report, sort_keys=True, default=str)}",
              file=sys.stderr)
        return 2
    report = {"out_dir": man.out_dir, "assertions": man.assertions}
    print(json.dumps(report, indent=2, sort_keys=True, default=str))
    if (args.assert_mode or cfg["assert"]) and not man.passed:
        failed = [a["name"] for a in man.assertions if not a["passed"]]
        print(f"failed checks: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
