"""Command line entry point: ``mfl <kind> --config FILE [--set key=value]...``.

Exit codes: 0 success, 2 configuration or guard violation, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .errors import GuardViolation, NumericalAbort
from .runner import KINDS, SCHEMA, ConfigError, load_config, parse_config, run

EXIT_OK, EXIT_GUARD, EXIT_ABORT = 0, 2, 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mfl", description="Mean-field laboratory experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="kind", required=True)
    for kind in KINDS:
        s = sub.add_parser(kind, help=f"run a {kind} experiment")
        s.add_argument("--config", help="config file (section.key = value lines)")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one key")
    r = sub.add_parser("rate", help="many-body mean-field rate over a list of N")
    r.add_argument("--N", required=True, help="comma separated particle numbers, e.g. 2,3,4,5")
    r.add_argument("--config", help="config file")
    r.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    sub.add_parser("keys", help="list configuration keys and defaults")
    return p


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.kind == "keys":
        for key, (_, default, help_) in SCHEMA.items():
            print(f"{key} = {default}    # {help_}")
        return EXIT_OK
    overrides = list(args.set)
    kind = args.kind
    if kind == "rate":
        overrides.append(f"scaling.N = {args.N}")
        kind = "manybody"
    try:
        if args.config:
            cfg = load_config(args.config, overrides, kind)
        else:
            cfg = parse_config("", overrides, kind)
        written = run(cfg)
    except ConfigError as e:
        print(f"mfl: {e}", file=sys.stderr)
        return EXIT_GUARD
    except GuardViolation as e:
        print(f"mfl: guard violation: {e}", file=sys.stderr)
        return EXIT_GUARD
    except NumericalAbort as e:
        print(f"mfl: numerical abort: {e}", file=sys.stderr)
        return EXIT_ABORT
    for fmt, path in sorted(written.items()):
        print(f"{fmt}: {path}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
