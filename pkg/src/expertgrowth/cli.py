"""Command-line entry point: one subcommand per pipeline stage plus ``run``."""

from __future__ import annotations

import argparse
import sys

from .config import ExperimentConfig, load_config
from .errors import ConfigError, StageError
from .pipeline import STAGES, Pipeline
from .report import ReportError

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="expertgrowth", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in (*STAGES, "run"):
        helptext = "all stages" if name == "run" else f"run up to and including {name}"
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", metavar="PATH", help="TOML config (default: packaged default.toml)")
        p.add_argument("--out", metavar="DIR", help="run directory (default: out_dir from the config)")
        p.add_argument("--stage-force", metavar="NAME", action="append", default=[], choices=STAGES,
                       help="recompute this stage even if its artifacts are current (repeatable)")
        p.add_argument("--jobs", metavar="N", type=int, default=1, help="worker processes for episodes")
        p.add_argument("-q", "--quiet", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    log = (lambda m: None) if args.quiet else (lambda m: print(m, file=sys.stderr))
    try:
        cfg: ExperimentConfig = load_config(args.config)
        target = "report" if args.command == "run" else args.command
        pipe = Pipeline(cfg, args.out, args.jobs, log)
        pipe.run(target, args.stage_force)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(str(exc), file=sys.stderr)
        if isinstance(exc.__cause__, ReportError):
            print(str(exc.__cause__), file=sys.stderr)
        return EXIT_STAGE
    if not args.quiet:
        print(f"done: {pipe.root}", file=sys.stderr)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
