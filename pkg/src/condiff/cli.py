"""Command-line experiment runner.

Verbs:
  run       execute pipeline stages from a config file
  resume    re-run skipping stages whose outputs already exist
  validate  check a config and print the resolved plan
  compare   consolidate metrics across finished runs

The CONDIFF_WORKERS environment variable controls rollout chunking only;
results are identical for any worker count.
"""

from __future__ import annotations

import argparse
import sys

from .config import load_config
from .pipeline import STAGES, compare_runs, plan, run_pipeline
from .sde import ConfigurationError


def _parse_stages(arg: str | None):
    if arg is None:
        return None
    arg = arg.strip()
    if not arg:
        return []
    return [s.strip() for s in arg.split(",") if s.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="condiff", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="verb", required=True)

    run = sub.add_parser("run", help="run pipeline stages")
    run.add_argument("--config", required=True, help="path to the YAML experiment config")
    run.add_argument("--out", default=None, help="output directory (default: config output_dir)")
    run.add_argument("--seed", type=int, default=None, help="override the config seed")
    run.add_argument(
        "--stages",
        default=None,
        help=f"comma-separated subset of {','.join(STAGES)}; empty string = dry run (plan only)",
    )

    res = sub.add_parser("resume", help="run, skipping completed stages")
    res.add_argument("--config", required=True)
    res.add_argument("--out", default=None)
    res.add_argument("--seed", type=int, default=None)
    res.add_argument("--stages", default=None)

    val = sub.add_parser("validate", help="validate a config and print the plan")
    val.add_argument("--config", required=True)

    cmp_ = sub.add_parser("compare", help="tabulate metrics across run directories")
    cmp_.add_argument("runs", nargs="+", help="run output directories")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.verb == "validate":
            cfg = load_config(args.config)
            print(plan(cfg))
            return 0
        if args.verb == "compare":
            compare_runs(args.runs)
            return 0
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        return run_pipeline(
            cfg,
            stages=_parse_stages(args.stages),
            resume=(args.verb == "resume"),
            out_dir=args.out,
        )
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
