"""Command-line entry point: ``meshdiff {gen-data,train,sample,ablate}``.

Every RunConfig field is exposed as a dotted flag (``--guidance.gamma 0``).
``--config`` loads a JSON config first; flags override it. On failure the
command prints a JSON error object to stderr and exits nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ConfigError, RunConfig, apply_overrides, flat_fields
from .experiments import COMMANDS


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _optional(kind):
    def parse(text: str):
        return None if text.lower() in ("none", "null", "") else kind(text)

    return parse


def _list_of(kind):
    def parse(text: str):
        return [kind(x) for x in text.split(",") if x.strip()]

    return parse


_OPTIONAL_KINDS = {"model.checkpoint": str, "data.manifest": str, "ablation.disrupted_gamma": float}


def _parser_type(name, default):
    if name in _OPTIONAL_KINDS:
        return _optional(_OPTIONAL_KINDS[name])
    if isinstance(default, bool):
        return _bool
    if isinstance(default, list):
        return _list_of(type(default[0]) if default else str)
    return type(default)


class _JSONArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError([message])


def build_parser() -> argparse.ArgumentParser:
    parser = _JSONArgumentParser(prog="meshdiff", description=__doc__.splitlines()[0])
    subs = parser.add_subparsers(dest="command", required=True, parser_class=_JSONArgumentParser)
    for name in COMMANDS:
        sub = subs.add_parser(name)
        sub.add_argument("--config", help="JSON RunConfig to start from")
        sub.add_argument("--verbose", action="store_true")
        for dotted, default in flat_fields():
            sub.add_argument(f"--{dotted}", dest=dotted, type=_parser_type(dotted, default), default=argparse.SUPPRESS)
    return parser


def main(argv=None) -> int:
    try:
        args = vars(build_parser().parse_args(argv))
        command = args.pop("command")
        logging.basicConfig(level=logging.INFO if args.pop("verbose") else logging.WARNING)
        path = args.pop("config")
        cfg = RunConfig.load(path) if path else RunConfig()
        cfg = apply_overrides(cfg, args).check()
        summary = COMMANDS[command](cfg)
    except ConfigError as exc:
        print(json.dumps({"error": "ConfigError", "messages": exc.errors}), file=sys.stderr)
        return 2
    except Exception as exc:  # reported, not swallowed: nonzero exit
        print(json.dumps({"error": type(exc).__name__, "messages": [str(exc)]}), file=sys.stderr)
        return 1
    print(json.dumps(summary, indent=2, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
