"""Command-line entry point: ``minirec VERB [--config PATH] [--seed N] [--out DIR]``.

Exit status 0 on success, 1 for user errors (bad config, missing upstream
artifact, unknown variant) and 2 for internal failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback

from .config import ConfigError, load_config
from .pipeline import VARIANTS, MissingArtifactError, Pipeline, StaleArtifactError, run_ablation

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2

VERBS = ("gen-data", "train-tokenizer", "sft", "rl", "eval", "ablate")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="minirec", description="Generative recommendation pipeline at desk scale.")
    p.add_argument("verb", choices=VERBS)
    p.add_argument("--config", metavar="PATH", help="flat 'section.key = value' config file")
    p.add_argument("--seed", type=int, metavar="N", help="global seed (overrides the config)")
    p.add_argument("--out", metavar="DIR", help="output directory (overrides config and MINIREC_OUT)")
    p.add_argument("--variant", metavar="NAME", help=f"ablation variant: {', '.join(VARIANTS)}")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="extra config override")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _overrides(args) -> dict[str, str]:
    pairs = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}", [item])
        pairs[key.strip()] = value.strip()
    if args.seed is not None:
        pairs["seed"] = str(args.seed)
    if args.out is not None:
        pairs["out"] = args.out
    return pairs


def run(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    pipe = Pipeline(cfg)
    if args.verb == "gen-data":
        print(pipe.gen_data())
    elif args.verb == "train-tokenizer":
        print(pipe.train_tokenizer())
    elif args.verb == "sft":
        print(pipe.sft())
    elif args.verb == "rl":
        print(pipe.rl())
    elif args.verb == "eval":
        rep = pipe.evaluate()
        print(json.dumps(rep.to_dict(), indent=2, sort_keys=True))
    else:
        if not args.variant:
            raise ConfigError("ablate needs --variant", ["--variant"])
        if args.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {args.variant!r}; choose from {', '.join(VARIANTS)}", [args.variant])
        res = run_ablation(cfg, args.variant)
        for row in res["rows"]:
            print(f"{row['variant']:24s} {row['metric']:10s} {row['value']:.4f}")
    return EXIT_OK


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; those are user errors here
        return EXIT_OK if exc.code in (0, None) else EXIT_USER
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USER
    except (MissingArtifactError, StaleArtifactError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception:  # noqa: BLE001
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
