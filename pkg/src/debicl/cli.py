"""Command line entry point.

Verbs
  run        train + evaluate every seed in the config
  eval       recompute robustness artifacts from existing checkpoints
  landscape  recompute landscape CSV/plot from existing checkpoints
  compare    diff two aggregate reports that share a protocol

Exit codes: 0 success, 2 config problem, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import load_config
from .errors import ConfigError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _add_config_flags(p):
    p.add_argument("--config", required=True, help="path to the YAML experiment config")
    p.add_argument("--seed", type=int, default=None, help="run only this seed (overrides the config list)")
    p.add_argument("--mode", default=None, help="override the config's training mode")
    p.add_argument("--out", default=None, help="override the config's output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="debicl", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="verb", required=True)

    p_run = sub.add_parser("run", help="train and evaluate an experiment")
    _add_config_flags(p_run)
    p_run.add_argument("--resume", action="store_true", help="continue from the last checkpoint per seed")

    p_eval = sub.add_parser("eval", help="recompute corruption robustness from checkpoints")
    _add_config_flags(p_eval)

    p_land = sub.add_parser("landscape", help="recompute loss landscape from checkpoints")
    _add_config_flags(p_land)

    p_cmp = sub.add_parser("compare", help="compare two aggregate reports")
    p_cmp.add_argument("report_a", help="baseline aggregate report.json")
    p_cmp.add_argument("report_b", help="comparison aggregate report.json")
    p_cmp.add_argument("--out", default=None, help="directory for comparison.{json,csv,png}")
    return parser


def _load_overridden(args):
    cfg = load_config(args.config)
    overrides = {}
    if args.mode is not None:
        overrides["mode"] = args.mode
    if args.seed is not None:
        overrides["seeds"] = [args.seed]
    if args.out is not None:
        overrides["output_dir"] = args.out
    if overrides:
        from .config import parse_config

        data = cfg.to_dict()
        # parse_config re-resolves sections, so feed back only the user-shaped keys
        data.update(overrides)
        cfg = parse_config(data)
    return cfg


def _load_report(path):
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"report not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"could not parse report {p}: {e}") from e


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.verb == "run":
            from .experiment import run_experiment

            cfg = _load_overridden(args)
            report = run_experiment(cfg, resume=args.resume)
            print(json.dumps(report["mean"], indent=2, sort_keys=True))
            print(f"artifacts: {cfg.output_dir / cfg.mode}")
        elif args.verb == "eval":
            from .experiment import evaluate_run

            cfg = _load_overridden(args)
            reports = evaluate_run(cfg)
            print(json.dumps({s: r.get("mce") for s, r in reports.items()}, indent=2, sort_keys=True))
        elif args.verb == "landscape":
            from .experiment import landscape_run

            cfg = _load_overridden(args)
            out = landscape_run(cfg)
            for s, prof in sorted(out.items()):
                print(f"seed {s}: loss at alpha=0 is {prof['mean_loss'][prof['alphas'].index(0.0)]:.6f}")
        elif args.verb == "compare":
            from .experiment import compare_runs, write_comparison

            comparison = compare_runs(_load_report(args.report_a), _load_report(args.report_b))
            print(json.dumps(comparison["mean_delta"], indent=2, sort_keys=True))
            if args.out:
                write_comparison(comparison, args.out)
                print(f"artifacts: {args.out}")
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001 - the CLI boundary maps everything to exit 3
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
