"""Command-line front end for the experiment pipeline.

Exit codes: 0 ok, 2 config error, 3 infeasible suite or diverged training,
4 missing/stale/corrupt files.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline as pl
from .dataset import ExpertFailure, MalformedRecord
from .evaluation import AblationMode
from .guidance import ConfigInconsistency, Wiring
from .policy import ChecksumMismatch, Divergence, NonFiniteLoss, ShapeMismatch
from .sim import PlacementInfeasible

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_IO = 0, 2, 3, 4


def _common(suppress: bool) -> argparse.ArgumentParser:
    # subcommand copies suppress their defaults so a flag given before the
    # subcommand is not reset by the subparser
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=d(None), help="experiment config (JSON); defaults are used when omitted")
    common.add_argument("--seed", type=int, default=d(None), help="override base_seed")
    common.add_argument("--jobs", type=int, default=d(1), help="worker processes for collection and evaluation")
    common.add_argument("--out", default=d(None), help="override output_dir")
    common.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common(suppress=True)
    p = argparse.ArgumentParser(prog="caglab", description=__doc__.splitlines()[0], parents=[_common(suppress=False)])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="generate scene-task suites")
    sub.add_parser("collect", parents=[common], help="collect biased expert demonstrations")
    t = sub.add_parser("train", parents=[common], help="train policy branches")
    t.add_argument("--branch", choices=pl.BRANCHES + ("all",), default="all")
    e = sub.add_parser("eval", parents=[common], help="evaluate wirings and input ablations")
    e.add_argument("--wiring", action="append", choices=[w.value for w in Wiring])
    e.add_argument("--mode", action="append", choices=[m.value for m in AblationMode])
    e.add_argument("--omega", type=float, help="override the guidance scale")
    e.add_argument("--no-studies", action="store_true", help="skip heatmaps and the attractor-removal study")
    sub.add_parser("sweep", parents=[common], help="guidance-scale sweep")
    sub.add_parser("report", parents=[common], help="write report/summary.md from eval and sweep outputs")
    sub.add_parser("all", parents=[common], help="run every step in order")
    return p


def _config(args) -> pl.ExperimentConfig:
    cfg = pl.load_config(args.config) if args.config else pl.ExperimentConfig()
    if args.seed is not None:
        if args.seed < 0:
            raise pl.ConfigError("--seed must be non-negative")
        cfg.base_seed = args.seed
    if args.out:
        cfg.output_dir = args.out
    if args.jobs < 1:
        raise pl.ConfigError("--jobs must be >= 1")
    if getattr(args, "omega", None) is not None:
        cfg.guidance["omega"] = args.omega
    pl.validate_config(cfg)
    return cfg


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _config(args)
        j = args.jobs
        if args.command == "gen":
            pl.cmd_gen(cfg, j)
        elif args.command == "collect":
            pl.cmd_collect(cfg, j)
        elif args.command == "train":
            pl.cmd_train(cfg, pl.BRANCHES if args.branch == "all" else (args.branch,), j)
        elif args.command == "eval":
            pl.cmd_eval(cfg, args.wiring, args.mode, not args.no_studies, j)
        elif args.command == "sweep":
            pl.cmd_sweep(cfg, j)
        elif args.command == "report":
            print(pl.cmd_report(cfg, j))
        elif args.command == "all":
            print(pl.run_all(cfg, j))
    except (pl.ConfigError, ConfigInconsistency) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (PlacementInfeasible, ExpertFailure, Divergence, NonFiniteLoss) as e:
        print(f"infeasible: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (OSError, MalformedRecord, ChecksumMismatch, ShapeMismatch) as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
