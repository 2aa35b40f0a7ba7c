"""Command-line front-end: ``batchloop <kind> [--config PATH] [--seed N | --seeds 1,2] [--out DIR]``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys

from .config import KINDS, ExperimentConfig, load_config
from .errors import ConfigError
from .experiments import EXIT_CONFIG, EXIT_IO, EXIT_OK, run_experiment

ENV_OUT = "BATCHLOOP_OUT"


def _seed_list(text: str) -> tuple[int, ...]:
    try:
        seeds = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not seeds:
        raise argparse.ArgumentTypeError("no seeds given")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="batchloop", description="Batch reactor ILC / RL experiments.")
    p.add_argument("kind", choices=KINDS, help="experiment to run")
    p.add_argument("--config", metavar="PATH", help="JSON configuration (omitted keys take defaults)")
    seeds = p.add_mutually_exclusive_group()
    seeds.add_argument("--seed", type=int, metavar="N", help="single seed")
    seeds.add_argument("--seeds", type=_seed_list, metavar="LIST", help="comma-separated seeds, one run each")
    p.add_argument("--out", metavar="DIR", help=f"output directory (falls back to ${ENV_OUT}, then the config)")
    p.add_argument("--episodes", type=int, metavar="N", help="override every episode/batch count")
    p.add_argument("--quiet", action="store_true", help="only log warnings and errors")
    return p


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    changes = {"kind": args.kind}
    if args.seed is not None:
        changes["seeds"] = (args.seed,)
    elif args.seeds is not None:
        changes["seeds"] = args.seeds
    out = args.out or os.environ.get(ENV_OUT) or cfg.output_dir
    if not out:
        raise ConfigError(f"no output directory: pass --out, set {ENV_OUT} or set output_dir", "output_dir")
    changes["output_dir"] = out
    if args.episodes is not None:
        if args.episodes < 1:
            raise ConfigError("must be >= 1", "--episodes")
        n = args.episodes
        changes["episodes"] = dataclasses.replace(cfg.episodes, ilc_batches=n, pretrain=n, online=n, baseline=n)
    cfg = dataclasses.replace(cfg, **changes)
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as err:
        print(f"cannot read config: {err}", file=sys.stderr)
        return EXIT_IO
    try:
        manifests = run_experiment(cfg)
    except OSError as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return EXIT_IO
    code = EXIT_OK
    for m in manifests:
        if not args.quiet:
            print(f"seed {m.seed}: {m.status}")
        if m.exit_code != EXIT_OK:
            print(f"seed {m.seed} failed: {m.error}", file=sys.stderr)
            code = code or m.exit_code
    return code


if __name__ == "__main__":
    sys.exit(main())
