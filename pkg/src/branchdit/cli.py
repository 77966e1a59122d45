"""``branchdit`` command line: gen-data, train, generate, bench, verify."""
from __future__ import annotations

import argparse
import logging
import sys

from .config import CONFIG_ENV, ConfigError, RunConfig
from .data import read_dataset
from . import harness, verify


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help=f"key=value config file (default: ${CONFIG_ENV})")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key; repeatable")
    p.add_argument("--out-dir")
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="branchdit", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic paired dataset")
    _add_common(p)
    p.add_argument("--task", choices=["spatial", "subject"])
    p.add_argument("--n", type=int)

    p = sub.add_parser("train", help="stage base (stage 1) or lora (stage 2)")
    _add_common(p)
    p.add_argument("--stage", choices=["base", "lora"])
    p.add_argument("--kind", choices=["spatial", "subject"])
    p.add_argument("--dataset")
    p.add_argument("--checkpoint")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)

    for name, help_ in (("generate", "sample one image"), ("bench", "time cached vs. uncached sampling")):
        p = sub.add_parser(name, help=help_)
        _add_common(p)
        p.add_argument("--checkpoint")
        p.add_argument("--adapters", help="comma-separated .cila files, in condition order")
        p.add_argument("--T", type=int, help="sampling steps")
        p.add_argument("--prompt", help="comma-separated token ids")
        if name == "generate":
            p.add_argument("--conditions", help="comma-separated kind:path entries")
            p.add_argument("--no-cache", action="store_true", help="recompute the condition branch every step")
            p.add_argument("--no-mutual", action="store_true", help="let condition blocks read each other")
        else:
            p.add_argument("--repeats", type=int)

    p = sub.add_parser("verify", help="run the invariant suite")
    p.add_argument("--fault", choices=list(verify.FAULTS), help="inject a known defect (suite must fail)")
    return parser


_FLAG_KEYS = ("out_dir", "seed", "task", "n", "stage", "kind", "dataset", "checkpoint", "steps", "lr",
              "adapters", "T", "prompt", "conditions", "repeats")


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Config file (or $BRANCHDIT_CONFIG), then --set pairs, then explicit flags; flags win."""
    cfg = RunConfig.load(getattr(args, "config", None))
    for pair in getattr(args, "set", []):
        if "=" not in pair:
            raise ConfigError(f"--set expects KEY=VALUE, got {pair!r}")
        key, value = pair.split("=", 1)
        cfg.set(key, value)
    for key in _FLAG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            cfg.set(key, str(value))
    for key in ("no_cache", "no_mutual"):
        if getattr(args, key, False):
            cfg.set(key, "true")
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "verify":
        results = verify.run_all(args.fault)
        failed = [r for r in results if not r.passed]
        print(f"{len(results) - len(failed)}/{len(results)} properties passed")
        return 1 if failed else 0
    try:
        cfg = resolve_config(args)
        if args.command == "gen-data":
            path = harness.cmd_gen_data(cfg.task, cfg.n, cfg.seed, cfg.out_dir)
            print(f"wrote {len(read_dataset(path))} samples to {path.parent}")
        elif args.command == "train":
            for what, path in harness.cmd_train(cfg).items():
                print(f"{what}: {path}")
        elif args.command == "generate":
            print(harness.cmd_generate(cfg))
        elif args.command == "bench":
            report = harness.cmd_bench(cfg)
            for line in report.summary():
                print(line)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
