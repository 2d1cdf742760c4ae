"""Command-line entry point: ``codsparse {run,sweep,verify-theory,report}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ..model.config import ConfigError
from ..theory import GridPointError
from .config import TheorySettings, load_config, load_theory
from .presets import preset_names
from .runner import IntegrityError, SweepError, merge_reports, run_experiment, sweep, verify_theory

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat dotted-key config file")
    p.add_argument("--preset", choices=preset_names(), help="built-in config; --config entries override it")
    p.add_argument("--out", type=Path, help="output directory (default: output_dir from the config)")
    p.add_argument("--seed", type=int, help="override the seed (and the sweep seed list)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="codsparse", description="Depth and sparsity experiments at desk scale.")
    parser.add_argument("-v", "--verbose", action="store_true", help="progress logging")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_common(sub.add_parser("run", help="train, probe and score one config"))
    p = sub.add_parser("sweep", help="one run per sweep value and seed, plus a comparison table")
    _add_common(p)
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p = sub.add_parser("verify-theory", help="Monte-Carlo theorem checks; exit 1 if any fails")
    _add_common(p)
    p.add_argument("--self-test", action="store_true", help="corrupt every bound; the run must fail")
    p = sub.add_parser("report", help="merge verified run directories into long-format CSVs")
    p.add_argument("runs", nargs="+", type=Path, help="run directories")
    p.add_argument("--out", type=Path, default=Path("report"), help="directory for merged tables")
    return parser


def _experiment(args):
    cfg = load_config(args.config, args.preset)
    if args.seed is not None:
        cfg = cfg.replace(train=cfg.train.replace(seed=args.seed))
        if cfg.sweep is not None:
            cfg = cfg.replace(sweep=cfg.sweep.__class__(cfg.sweep.axis, cfg.sweep.values, (args.seed,)))
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        if args.command == "run":
            cfg = _experiment(args)
            art = run_experiment(cfg, args.out)
            print(art.directory)
        elif args.command == "sweep":
            cfg = _experiment(args)
            _, table = sweep(cfg, args.out, jobs=args.jobs)
            print(table)
        elif args.command == "verify-theory":
            name, out_dir, settings = load_theory(args.config, args.preset or (None if args.config else "theory"))
            if args.seed is not None or args.self_test:
                settings = TheorySettings(settings.grid, settings.trials,
                                          settings.seed if args.seed is None else args.seed,
                                          settings.self_test or args.self_test)
            reports, summary = verify_theory(settings, args.out or out_dir, name)
            failed = [r for r in reports if not r.verdict]
            print(f"{len(reports) - len(failed)}/{len(reports)} checks passed; summary at {summary}")
            for r in failed:
                print(f"FAIL {r.theorem} {r.params}: empirical={r.empirical!r} target={r.target!r} bound={r.bound!r}")
            return EXIT_FAIL if failed else EXIT_OK
        elif args.command == "report":
            timeline, scores = merge_reports(args.runs, args.out)
            print(timeline)
            print(scores)
    except (ConfigError, GridPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, IntegrityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except SweepError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK
