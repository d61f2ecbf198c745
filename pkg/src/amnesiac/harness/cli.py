"""``amnesiac`` command line: train, remove, attack, sweep, report.

Exit codes: 0 success, 2 bad usage or configuration, 3 missing or malformed
input data, 4 journal error, 5 numerical divergence, 6 removal or attack
failure, 1 anything else.
"""

from __future__ import annotations

import argparse
import sys

from amnesiac.attacks import AttackError
from amnesiac.data import IdxError
from amnesiac.harness.config import ConfigError, load_config
from amnesiac.harness.experiment import (
    ReportError,
    attack_only,
    report,
    run_experiment,
    sweep_removal_fraction,
    train_only,
)
from amnesiac.journal import JournalError
from amnesiac.nn import ArchitectureError, DivergenceError
from amnesiac.removal import RemovalError

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_DATA, EXIT_JOURNAL, EXIT_DIVERGED, EXIT_REMOVAL = 0, 1, 2, 3, 4, 5, 6

# checked in order; the first matching class decides the category
_CATEGORIES = (
    (ConfigError, EXIT_CONFIG, "config error"),
    (ArchitectureError, EXIT_CONFIG, "config error"),
    (JournalError, EXIT_JOURNAL, "journal error"),
    (IdxError, EXIT_DATA, "data error"),
    (ReportError, EXIT_DATA, "missing input"),
    (FileNotFoundError, EXIT_DATA, "missing input"),
    (DivergenceError, EXIT_DIVERGED, "training diverged"),
    (RemovalError, EXIT_REMOVAL, "removal error"),
    (AttackError, EXIT_REMOVAL, "attack error"),
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="amnesiac", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True)
    helps = {
        "train": "train the target model and save it with its journal",
        "remove": "full experiment: train, apply the removal method, evaluate each phase",
        "attack": "attack the model saved by 'train' in --out",
        "sweep": "undo random batch fractions and record test accuracy",
        "report": "render tables from the metrics under --out",
    }
    for verb, text in helps.items():
        p = sub.add_parser(verb, help=text)
        p.add_argument("--out", help="output directory (overrides the config's 'out')")
        if verb != "report":
            p.add_argument("--config", help="key = value configuration file")
            p.add_argument("--seed", type=int, help="global seed (overrides the config's 'seed')")
            p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                           help="override one configuration key; repeatable")
    return parser


def _overrides(args) -> dict:
    values = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set {item!r}: expected KEY=VALUE")
        values[key.strip()] = value.strip()
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("seed: must be non-negative")
        values["seed"] = args.seed
    if args.out:
        values["out"] = args.out
    return values


def _run(args) -> None:
    if args.verb == "report":
        if not args.out:
            raise ConfigError("--out: required for report")
        sys.stdout.write(report(args.out))
        return
    cfg = load_config(args.config, _overrides(args))
    if args.verb == "train":
        result = train_only(cfg)
    elif args.verb == "attack":
        result = attack_only(cfg)
    elif args.verb == "remove":
        result = run_experiment(cfg)
    else:
        sweep_removal_fraction(cfg)
        print(f"wrote {cfg.out}/sweep.csv")
        return
    print(f"wrote {result.out}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _run(args)
    except Exception as exc:  # noqa: BLE001 - mapped to an exit category below
        for kind, code, label in _CATEGORIES:
            if isinstance(exc, kind):
                print(f"amnesiac: {label}: {exc}", file=sys.stderr)
                return code
        print(f"amnesiac: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
