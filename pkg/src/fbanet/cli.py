"""Command-line entry point: ``fbanet <command> --config run.toml``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_config

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

COMMANDS = ("train", "extract-patterns", "make-imagesets", "evaluate", "analyze")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fbanet", description="Feature-based attention experiments on a small CNN.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "train": "train the backbone and write the weight file",
        "extract-patterns": "compute per-category feature patterns from the training images",
        "make-imagesets": "build array and merged composite imagesets",
        "evaluate": "run the detector sweep and write results.csv",
        "analyze": "derive delta tables, ROC points and win histograms from results",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", required=name != "analyze", help="TOML run configuration")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--out", help="output directory (overrides [paths] out)")
        if name == "evaluate":
            p.add_argument("--workers", type=int, help="parallel sweep workers; output does not depend on it")
            p.add_argument("--resume", action="store_true", help="continue an existing results file")
        if name == "analyze":
            p.add_argument("--results", help="results CSV (default: <out>/results.csv)")
    return parser


def _analyze(args) -> int:
    from .pipeline import cmd_analyze

    if args.config:
        cfg = load_config(args.config, seed=args.seed, out=args.out)
        run_dir = cfg.out
    elif args.out or args.results:
        run_dir = Path(args.out) if args.out else Path(args.results).parent
    else:
        raise ConfigError("analyze needs --config, --out or --results")
    results = Path(args.results) if args.results else run_dir / "results.csv"
    written = cmd_analyze(results, run_dir / "analysis", results.parent / "control.csv")
    for p in written:
        print(p)
    return EXIT_OK


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    from . import pipeline as P
    from .network import WeightFileError
    from .train import TrainingDiverged

    try:
        if args.command == "analyze":
            return _analyze(args)
        cfg = load_config(args.config, seed=args.seed, out=args.out, workers=getattr(args, "workers", None))
        if args.command == "train":
            print(P.cmd_train(cfg))
        elif args.command == "extract-patterns":
            ps = P.cmd_extract_patterns(cfg)
            for l in ps.layers:
                print(f"relu{l}: {len(ps.get(l, ps.categories[0]))} channels")
            print(cfg.patterns)
        elif args.command == "make-imagesets":
            for kind, path in P.cmd_make_imagesets(cfg).items():
                print(f"{kind}: {path}")
        elif args.command == "evaluate":
            print(P.cmd_evaluate(cfg, resume=args.resume))
    except ConfigError as e:
        print(f"fbanet: config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (P.PipelineError, TrainingDiverged, WeightFileError, ValueError, OSError) as e:
        print(f"fbanet: {args.command} failed: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(run())
