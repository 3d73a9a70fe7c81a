"""Command-line entry point: ``flimcl <stage|all> [--config FILE] [--seed N] [--out DIR]``."""
from __future__ import annotations

import argparse
import sys

import numpy as np

from . import pipeline
from .errors import ConfigError, FlimclError, ParameterError, StageDependencyError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DEPENDENCY = 3
EXIT_NUMERICAL = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flimcl", description="Synthetic FLIm label-curation pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "synth": "simulate margins and waveforms, then corrupt margin labels",
        "features": "deconvolve waveforms and extract per-point features",
        "train": "LOPO-evaluate candidate models and select the baseline",
        "curate": "confidence scores, confident joint and margin statuses",
        "refine": "merge classes, prune low-confidence training points, re-score",
        "attrib": "Shapley attribution and permutation importance",
        "report": "write the plain-text summary",
        "all": "run every stage listed in the config",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", help="JSON config (defaults to the built-in demo config)")
        p.add_argument("--seed", type=int, help="master seed override")
        p.add_argument("--out", help=f"output directory (overrides ${pipeline.OUT_ENV} and the config)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = pipeline.load_config(args.config, seed=args.seed, out=args.out)
        stages = None if args.command == "all" else [args.command]
        out = pipeline.run_pipeline(cfg, stages, log=lambda msg: print(msg, file=sys.stderr))
    except (ConfigError, ParameterError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except StageDependencyError as e:
        print(f"dependency error: {e}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except (FlimclError, FloatingPointError, np.linalg.LinAlgError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    print(f"artifacts in {out}", file=sys.stderr)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
