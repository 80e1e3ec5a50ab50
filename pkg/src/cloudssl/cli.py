"""Command line: ``cloudssl <command> [--config PATH] [--seed N] [--out DIR] [--ckpt PATH]``.

Commands: gen-data, pretrain, finetune, evaluate, compare, stats-test, figures.
The compute device is taken from the ``CLOUDSSL_DEVICE`` environment variable
(default ``cpu``).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import experiment as ex
from .spatial_test import InapplicableTest
from .training import TrainingDiverged

COMMANDS = ("gen-data", "pretrain", "finetune", "evaluate", "compare", "stats-test", "figures")


def _named_paths(items) -> dict[str, str]:
    out = {}
    for item in items or []:
        name, sep, path = item.partition("=")
        if not sep or not name or not path:
            raise ex.ConfigError(f"expected NAME=PATH, got {item!r}")
        out[name] = path
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cloudssl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration (defaults fill the rest)")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", required=name not in ("compare", "stats-test"),
                       help="output directory")
        if name in ("finetune", "evaluate"):
            p.add_argument("--ckpt", help="input checkpoint directory")
        if name == "figures":
            p.add_argument("--ckpt", action="append", default=[],
                           help="pre-training or fine-tuning checkpoint (repeatable)")
            p.add_argument("--run", action="append", default=[], help="run directory with log.jsonl")
            p.add_argument("--records", action="append", default=[], metavar="NAME=PATH")
            p.add_argument("--png", action="store_true", help="also rasterize PNGs")
        if name == "compare":
            p.add_argument("records", nargs="+", metavar="NAME=PATH", help="evaluation record files")
        if name == "stats-test":
            p.add_argument("first", help="records of model 1")
            p.add_argument("second", help="records of model 2")
    return parser


def run(args: argparse.Namespace) -> dict:
    cfg = ex.load_config(args.config, args.seed)
    cmd = args.command
    if cmd == "gen-data":
        return ex.gen_data(cfg, args.out)
    if cmd == "pretrain":
        return ex.run_pretrain(cfg, args.out)
    if cmd == "finetune":
        return ex.run_finetune(cfg, args.out, args.ckpt)
    if cmd == "evaluate":
        return ex.run_evaluate(cfg, args.out, args.ckpt)
    if cmd == "compare":
        doc = ex.run_compare(_named_paths(args.records), args.out)
        print(ex.format_table(doc), end="")
        return doc
    if cmd == "stats-test":
        return ex.run_stats_test(cfg, args.first, args.second, args.out)
    if args.png:
        cfg["figures"]["png"] = True
    return ex.run_figures(cfg, args.out, ckpts=args.ckpt, runs=args.run,
                          records=_named_paths(args.records))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = run(args)
    except (ex.ConfigError, ex.ProvenanceError, InapplicableTest, FileExistsError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except TrainingDiverged as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return 3
    if args.command != "compare":
        print(json.dumps(result, indent=1, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
