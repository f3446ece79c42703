"""Command-line entry point: hatespace <command> --config <file> [flags]."""

from __future__ import annotations

import argparse
import json
import sys

from .data import DataFormatError
from .pipeline import (
    MissingArtifactError,
    load_config,
    run_analyze,
    run_build,
    run_eval,
    run_factorize,
    run_generate,
    run_train,
)

COMMANDS = {
    "generate": run_generate,
    "build": run_build,
    "factorize": run_factorize,
    "train": run_train,
    "eval": run_eval,
    "analyze": run_analyze,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hatespace",
        description="Culture-aware hate-perception modeling pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("generate", "write a synthetic dataset with planted effects"),
        ("build", "ingest data, build the combination universe and matrix"),
        ("factorize", "fit the latent factor model on the matrix"),
        ("train", "train classifier heads (one per seed)"),
        ("eval", "evaluate trained heads and write metrics JSON"),
        ("analyze", "leverage ordering, reconstruction and accumulation curves"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="INI config file")
        p.add_argument("--seed", type=int, default=None,
                       help="override all stage seeds with one value")
        p.add_argument("--out-dir", default=None, help="override paths.out_dir")
        p.add_argument("--mask", default=None,
                       help="comma list of feature blocks to drop (hp,q,s)")
        p.add_argument("--pooling", default=None,
                       choices=["weighted", "sum", "mean", "anno"],
                       help="override subspace pooling mode")
        if name == "eval":
            p.add_argument("--split", default=None,
                           choices=["train", "val", "test"],
                           help="split to evaluate (default: test)")
        if name == "analyze":
            p.add_argument("--checkpoints", default=None,
                           help="comma list of combination-budget checkpoints")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {
        "seed": args.seed,
        "out_dir": args.out_dir,
        "mask": args.mask,
        "pooling": args.pooling,
        "checkpoints": getattr(args, "checkpoints", None),
        "split": getattr(args, "split", None),
    }
    try:
        config = load_config(args.config, overrides)
        result = COMMANDS[args.command](config)
    except (MissingArtifactError, FileNotFoundError, DataFormatError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if args.command == "build":
        print(f"z={result['z']} m={result['m']} nnz={result['nnz']}")
    else:
        print(json.dumps(result, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
