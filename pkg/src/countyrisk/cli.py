"""Command-line entry point.

Subcommands mirror the pipeline stages. Exit codes: 0 success, 2 bad
input or schema, 3 numerical failure, 4 missing prerequisite stage.
"""

from __future__ import annotations

import argparse
import sys

from . import __version__
from .errors import CountyRiskError, InputError, MissingStageError, NumericalError
from .pipeline import build_config, run_stage

STAGES = ("ingest", "train", "explain", "cluster", "spatial", "synth", "report")


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="countyrisk",
        description="County mortality-risk analytics pipeline",
    )
    parser.add_argument("--version", action="version", version=f"countyrisk {__version__}")
    sub = parser.add_subparsers(dest="stage", required=True)
    for stage in STAGES:
        p = sub.add_parser(stage, help=f"run the {stage} stage")
        p.add_argument("--config", help="flat key=value configuration file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="global seed")
        p.add_argument("--permutations", type=int, help="permutation count")
        p.add_argument("--folds", type=int, help="cross-validation folds")
        p.add_argument("--top-n", type=int, dest="top_n", help="rows in the ranked table")
        p.add_argument("--threads", type=int, help="worker threads for kernels")
        p.add_argument("--mortality")
        p.add_argument("--svi")
        p.add_argument("--places")
        p.add_argument("--ahrf")
        p.add_argument("--adjacency")
        p.add_argument("--centroids")
        if stage == "synth":
            p.add_argument("--n", type=int, default=100, help="number of counties")
            p.add_argument(
                "--scenario",
                default="null",
                choices=("linear", "threshold", "clustered", "null"),
            )
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    overrides = {
        key: getattr(args, key, None)
        for key in (
            "out_dir", "seed", "permutations", "folds", "top_n", "threads",
            "mortality", "svi", "places", "ahrf", "adjacency", "centroids",
        )
    }
    overrides["out_dir"] = getattr(args, "out", None)
    try:
        config = build_config(args.config, overrides)
        kwargs = {}
        if args.stage == "synth":
            kwargs = {"n": args.n, "scenario": args.scenario}
        result = run_stage(args.stage, config, **kwargs)
        summary = {
            k: v
            for k, v in result.items()
            if isinstance(v, (int, float, str, list, dict)) and k != "reports"
        }
        print(f"{args.stage}: ok {summary}")
        return 0
    except MissingStageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc.filename}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except CountyRiskError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
