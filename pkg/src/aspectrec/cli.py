"""Command line: one subcommand per pipeline stage over a JSON config.

Precedence: built-in defaults < config file < command line flags.
Exit codes: 0 ok, 1 user error (bad config, missing upstream artifact), 2 internal error.
"""

import argparse
import logging
import sys
from dataclasses import fields

from . import pipeline
from .pipeline import STAGE_FUNCS, STAGES, Config, UserError

logger = logging.getLogger(__name__)

_PATH_KEYS = ("log", "aliases", "corpus", "edits", "embeddings", "labels", "events")


def _add_config_flags(p):
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--out", help="output directory")
    for key in _PATH_KEYS:
        p.add_argument(f"--{key}", help=f"{key} input path")
    for f in fields(Config):
        if f.name in _PATH_KEYS or f.name == "out":
            continue
        flag = "--" + f.name.replace("_", "-")
        if f.type is bool or isinstance(f.default, bool):
            p.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        else:
            p.add_argument(flag, dest=f.name, type=type(f.default), default=None,
                           help=f"default {f.default}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="aspectrec",
        description="Time- and type-aware entity aspect recommendation over query logs.")
    sub = parser.add_subparsers(dest="command", required=True)
    for stage in STAGES + ("all",):
        help_text = "run every stage in order" if stage == "all" else f"run the {stage} stage"
        p = sub.add_parser(stage, help=help_text)
        _add_config_flags(p)
        if stage == "all":
            p.add_argument("--no-synth", action="store_true",
                           help="skip data generation and use the configured inputs")
    return parser


def _config(args):
    overrides = {f.name: getattr(args, f.name, None) for f in fields(Config)}
    return Config.load(args.config, **overrides)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = _config(args)
        if args.command == "all":
            pipeline.run_all(cfg, synth=not args.no_synth)
        else:
            STAGE_FUNCS[args.command](cfg)
    except UserError as exc:
        logger.error("%s", exc)
        return 1
    except Exception:  # noqa: BLE001 - anything else is a bug, report it as such
        logger.exception("internal error in %s", args.command)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
