"""Command-line interface.

Subcommands:

``ftn recovery``      noisy tree-network recovery benchmark (three bases)
``ftn classify``      image classification experiments
``ftn selftest``      tiny-instance oracle suite, pass/fail per property
``ftn grid-search``   classify once per value of one config field

Configuration comes from an INI file (``--config``), overridable per key by
a flag of the same name (``--max-iters 100``) or ``--set section.key=value``.
Exit codes: 0 success, 1 configuration error, 2 numerical failure.

Only the standard library is imported at module scope: thread-count
environment variables must be in place before the numeric stack loads.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import os
import sys

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


class ConfigError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on usage errors; the CLI contract says 1."""

    def error(self, message):
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_override_flags(parser: argparse.ArgumentParser, kind: str) -> None:
    from .experiments import config_sections

    for keys in config_sections(kind).values():
        for key in keys:
            parser.add_argument(
                f"--{key.replace('_', '-')}", dest=key, default=None, metavar="V"
            )
    parser.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override any config entry",
    )
    group = parser.add_mutually_exclusive_group()
    group.add_argument(
        "--armijo",
        action="store_true",
        help="line-searched steps (step_rule=armijo)",
    )
    group.add_argument(
        "--fixed-step",
        type=float,
        default=None,
        metavar="G",
        help="constant step length (step_rule=fixed, gamma=G)",
    )


def _common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="INI config file")
    parser.add_argument(
        "--threads",
        type=int,
        default=None,
        help="worker threads for the numeric stack (default: all cores; "
        "FTN_THREADS overrides)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ftn", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    recovery = sub.add_parser("recovery", help="recovery benchmark")
    _common_flags(recovery)
    _add_override_flags(recovery, "recovery")
    recovery.set_defaults(handler=_cmd_recovery)

    classify = sub.add_parser("classify", help="image classification")
    _common_flags(classify)
    _add_override_flags(classify, "classify")
    classify.set_defaults(handler=_cmd_classify)

    selftest = sub.add_parser("selftest", help="oracle property suite")
    selftest.add_argument(
        "--checkpoint", default=None, help="also validate this model file"
    )
    selftest.add_argument("--threads", type=int, default=None)
    selftest.set_defaults(handler=_cmd_selftest)

    grid = sub.add_parser("grid-search", help="sweep one classify config field")
    _common_flags(grid)
    grid.add_argument("--param", required=True, help="config field to sweep")
    grid.add_argument(
        "--values", required=True, help="comma-separated values to try"
    )
    _add_override_flags(grid, "classify")
    grid.set_defaults(handler=_cmd_grid_search)
    return parser


def _configure_threads(requested: int | None) -> None:
    env = os.environ.get("FTN_THREADS")
    count = env if env else (str(requested) if requested else None)
    if count is not None:
        for var in _THREAD_VARS:
            os.environ[var] = count


def _build_config(kind: str, args):
    from .experiments import (
        ClassifyConfig,
        RecoveryConfig,
        coerce_field,
        config_sections,
    )

    cls = RecoveryConfig if kind == "recovery" else ClassifyConfig
    sections = config_sections(kind)
    known = {key: section for section, keys in sections.items() for key in keys}
    values = {}

    if args.config:
        parser = configparser.ConfigParser()
        if not parser.read(args.config):
            raise ConfigError(f"cannot read config file {args.config}")
        declared = parser.get("experiment", "kind", fallback=kind)
        if declared != kind:
            raise ConfigError(
                f"config declares kind={declared}, but the subcommand is {kind}"
            )
        for section in parser.sections():
            if section not in sections:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in parser[section].items():
                if section == "experiment" and key == "kind":
                    continue
                if known.get(key) != section:
                    raise ConfigError(f"unknown config key {section}.{key}")
                values[key] = coerce_field(cls, key, raw)

    for entry in args.set:
        head, sep, raw = entry.partition("=")
        section, dot, key = head.partition(".")
        if not sep or not dot or known.get(key) != section:
            raise ConfigError(f"malformed or unknown override {entry!r}")
        values[key] = coerce_field(cls, key, raw)

    for key in known:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = coerce_field(cls, key, flag)

    if args.fixed_step is not None:
        values["step_rule"] = "fixed"
        values["gamma"] = args.fixed_step
    elif args.armijo:
        values["step_rule"] = "armijo"

    try:
        return cls(**values)
    except TypeError as err:
        raise ConfigError(str(err)) from None


def _cmd_recovery(args) -> int:
    from .experiments import run_recovery

    cfg = _build_config("recovery", args)
    result = run_recovery(cfg)
    print(f"loss floor {result['floor']:.3e}, threshold {result['threshold']:.3e}")
    for (method, basis), info in result["runs"].items():
        reached = info["iterations_to_threshold"]
        print(
            f"{method:8s} {basis:10s} final loss {info['final_loss']:.3e}  "
            f"reached threshold at "
            f"{'never' if reached is None else f'iteration {reached}'}"
        )
    print(f"traces written to {cfg.outdir}")
    return 0


def _cmd_classify(args) -> int:
    from .experiments import run_classify

    cfg = _build_config("classify", args)
    result = run_classify(cfg)
    for method, info in result["runs"].items():
        acc = info["final_accuracy"]
        print(
            f"{method:10s} final loss {info['final_loss']:.4f}  "
            f"test accuracy {'n/a' if acc is None else f'{acc:.4f}'}"
        )
    print(f"traces written to {cfg.outdir}")
    return 0


def _cmd_selftest(args) -> int:
    from .selftest import run_selftest

    return run_selftest(args.checkpoint)


def _cmd_grid_search(args) -> int:
    from .experiments import run_grid_search

    cfg = _build_config("classify", args)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("--values is empty")
    result = run_grid_search(cfg, args.param, values)
    for method, (value, acc) in result["best"].items():
        print(f"{method:10s} best {args.param}={value}  test accuracy {acc:.4f}")
    print(f"grid results written to {cfg.outdir}")
    return 0


def main(argv=None) -> int:
    # Thread limits must hit the environment before anything numeric loads,
    # and building the full parser pulls in the experiment modules; scan for
    # --threads first with a minimal parser.
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--threads", type=int, default=None)
    early, _ = pre.parse_known_args(argv)
    _configure_threads(early.threads)

    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    from .errors import NumericalError

    try:
        return args.handler(args)
    except NumericalError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 2
    except (ValueError, OSError, configparser.Error) as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
