"""Command line: ``cgq {gridworld,theory,sweep,dataset} --config FILE``.

Exit status is 0 when every acceptance flag passes, 2 when any flag fails and 1 for
usage or configuration errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .config import ConfigError, config_from_dict, default_document, load_config
from .experiments import run_dataset, run_gridworld, run_sweep, run_theory

log = logging.getLogger("cgq")

EXIT_OK, EXIT_USAGE, EXIT_FLAGS = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cgq", description="Tabular chunk-guided Q-learning laboratory")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("gridworld", "single-step vs chunked vs CGQ value backups on the gridworld"),
        ("theory", "Monte-Carlo verification of the error bounds on linear contractions"),
        ("sweep", "Cartesian sweep over one arm's parameters"),
        ("dataset", "collect and write the offline gridworld dataset as JSON lines"),
    ):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", type=Path, help="JSON config (defaults are used when omitted)")
        sp.add_argument("--seed-override", type=int, help="replace the config's master noise seed")
        if name == "dataset":
            sp.add_argument("--out", type=Path, required=True, help="output .jsonl file")
        else:
            sp.add_argument("--out-dir", type=Path, help="output directory (overrides output_dir)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    try:
        if args.config is not None:
            config = load_config(args.config)
        else:
            config = config_from_dict(default_document(args.command))
        if config.experiment != args.command:
            config = dataclasses.replace(config, experiment=args.command)
        if args.seed_override is not None:
            config = dataclasses.replace(config, seed=args.seed_override)
    except (OSError, ConfigError) as exc:
        print(f"cgq: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    try:
        if args.command == "dataset":
            path = run_dataset(config, args.out)
            print(path)
            return EXIT_OK
        out_dir = args.out_dir or Path(config.output_dir)
        runner = {"gridworld": run_gridworld, "theory": run_theory, "sweep": run_sweep}[args.command]
        summary = runner(config, out_dir)
    except (OSError, ValueError) as exc:
        print(f"cgq: {exc}", file=sys.stderr)
        return EXIT_USAGE

    for name, ok in sorted(summary.flags.items()):
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    log.info("wrote %d files to %s", len(summary.files), out_dir)
    return EXIT_OK if summary.passed else EXIT_FLAGS


if __name__ == "__main__":
    sys.exit(main())
