"""Command-line entry point: ``pani train | eval | selftest | graph-dump``.

Exit codes: 0 success, 1 failed self-test, 2 configuration error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import logging
import sys
from typing import Optional, Sequence

import numpy as np

from pani.checkpoint import load_checkpoint
from pani.config import parse_config
from pani.errors import ConfigError, FormatError, NonFiniteError
from pani.neighbors import write_neighbor_csv
from pani.selftest import run_selftest
from pani.train import batch_graphs, evaluate_error, prepare, train

EXIT_OK = 0
EXIT_SELFTEST = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

log = logging.getLogger("pani")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pani", description="Patch-level neighborhood interpolation experiments")
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one configuration")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable; value parsed as JSON when possible)")
    p.add_argument("--out", help="output directory (config.json, metrics.csv, checkpoint.pani)")

    p = sub.add_parser("eval", help="test error of a checkpoint on the config's test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")

    p = sub.add_parser("selftest", help="run the built-in oracle checks")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("graph-dump", help="CSV of the neighbour graph for the first N training images")
    p.add_argument("--config", required=True)
    p.add_argument("--batch", type=int, required=True, metavar="N")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--checkpoint", help="use these parameters instead of the seeded initialisation")
    p.add_argument("--workers", type=int, default=1, help="threads for the per-image neighbour search")
    p.add_argument("--output", help="write here instead of stdout")
    return parser


def cmd_train(args) -> int:
    overrides = list(args.overrides)
    if args.out:
        overrides.append(f"out={args.out}")
    cfg = parse_config(args.config, overrides)
    records, _ = train(cfg, cfg.out)
    last = records[-1]
    print(f"final test error {last.test_error_percent:.2f}% after {last.epoch} epochs")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = parse_config(args.config, args.overrides)
    ds, split, params, _ = prepare(cfg)
    loaded = load_checkpoint(args.checkpoint)
    if set(loaded) != set(params) or any(loaded[k].shape != params[k].shape for k in params):
        raise ConfigError(f"checkpoint {args.checkpoint} does not match the model of this config")
    err = evaluate_error(loaded, ds.images[split.test], ds.labels[split.test])
    print(f"test error {err:.2f}% on {len(split.test)} samples")
    return EXIT_OK


def cmd_selftest(args) -> int:
    return EXIT_OK if run_selftest(args.seed) else EXIT_SELFTEST


def cmd_graph_dump(args) -> int:
    cfg = parse_config(args.config, args.overrides)
    if args.workers < 1:
        raise ConfigError("--workers must be >= 1")
    ds, split, params, streams = prepare(cfg)
    if args.checkpoint:
        params = load_checkpoint(args.checkpoint)
    pool = np.concatenate([split.labeled, split.unlabeled])
    if not 2 <= args.batch <= len(pool):
        raise ConfigError(f"--batch must lie in [2, {len(pool)}], got {args.batch}")
    graphs = batch_graphs(cfg, params, ds.images[pool[:args.batch]], streams, workers=args.workers)
    fh = open(args.output, "w", newline="") if args.output else sys.stdout
    try:
        for n, (tap, index) in enumerate(graphs):
            write_neighbor_csv(index, fh, tap=tap, header=n == 0)
    finally:
        if args.output:
            fh.close()
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "selftest": cmd_selftest, "graph-dump": cmd_graph_dump}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, FormatError, FileNotFoundError) as exc:
        print(f"pani: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteError as exc:
        print(f"pani: numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except BrokenPipeError:
        return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
