"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 estimation
failure (1 for anything unexpected).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import __version__
from .config import load_config
from .errors import ThreshPanelError
from .pipeline import COMMANDS, run_pipeline

log = logging.getLogger("threshpanel")

HELP = {
    "ingest": "read, validate and filter the panel; write panel, drop report and summary statistics",
    "search": "ingest, then select the cutoff and write the objective profile",
    "effects": "ingest, search, then estimate jump and kink per outcome",
    "hetero": "ingest, then run group and density-bin searches",
    "placebo": "ingest, search, then run placebo checks on the controls",
    "rdplot": "ingest, search, then write binned RD-plot data",
    "synth": "write a synthetic panel from the [synth] block",
    "mc": "run the Monte Carlo harness from the [synth] and [mc] blocks",
    "all": "ingest, search, effects and every enabled optional stage",
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="threshpanel", description="Breakpoint search and piecewise effects on panels.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")
    for name in COMMANDS:
        sp = sub.add_parser(name, help=HELP[name], description=HELP[name])
        sp.add_argument("-c", "--config", required=True, help="TOML run configuration")
        sp.add_argument("-o", "--output-dir", help="override output_dir from the config")
        sp.add_argument("-s", "--seed", type=int, help="override the master seed")
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        out = None if args.output_dir is None else os.path.abspath(args.output_dir)
        cfg = cfg.with_overrides(output_dir=out, seed=args.seed)
        manifest = run_pipeline(cfg, args.command)
    except ThreshPanelError as exc:
        stage = getattr(exc, "stage", "")
        where = f" in stage {stage}" if stage else ""
        print(f"threshpanel: {type(exc).__name__}{where}: {exc}", file=sys.stderr)
        return exc.exit_code
    log.info("wrote %d files to %s", len(manifest.files), cfg.output_dir)
    print(os.path.join(cfg.output_dir, "manifest.json"))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
