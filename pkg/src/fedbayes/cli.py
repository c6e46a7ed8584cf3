"""Command line entry point.

    fedbayes <kind> --config PATH [--seed S]... [--out PATH] [--format json|csv]
    fedbayes <kind> --preset NAME ...
    fedbayes accountant --K 10 --m 100 --T 100 --tau 10 --delta 1e-5
    fedbayes presets

Exit codes: 0 ok, 2 configuration error, 3 numeric divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings

from .errors import ConfigError, DivergenceError, FedBayesError, NoBudgetError
from .harness import KINDS, PRESETS, ExperimentConfig, emit_report, preset, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENCE = 0, 2, 3

_ACCOUNTANT_FLAGS = [
    ("K", int), ("m", int), ("T", int), ("tau", int), ("c1", float), ("c2", float),
    ("sigma_q1", float), ("sigma_q2", float), ("delta", float), ("epsilon", float),
]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fedbayes", description="Personalized federated estimation experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("presets", help="list the named experiment presets")
    for kind in KINDS:
        p = sub.add_parser(kind, help=f"run a {kind} experiment")
        src = p.add_mutually_exclusive_group(required=kind != "accountant")
        src.add_argument("--config", help="JSON config file")
        src.add_argument("--preset", choices=sorted(PRESETS), help="start from a named preset")
        p.add_argument("--seed", type=int, action="append", dest="seeds",
                       help="seed (repeatable); overrides the config seeds")
        p.add_argument("--out", help="output path (default: stdout)")
        p.add_argument("--format", choices=("json", "csv"), help="report format")
        if kind == "accountant":
            for name, typ in _ACCOUNTANT_FLAGS:
                p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ)
            p.add_argument("--mode", choices=("separate", "joint"))
    return parser


def _config_from_args(args) -> ExperimentConfig:
    if args.config:
        cfg = ExperimentConfig.load(args.config)
    elif args.preset:
        cfg = preset(args.preset)
    else:
        cfg = ExperimentConfig(kind=args.command)
    if cfg.kind != args.command:
        raise ConfigError(f"config kind {cfg.kind!r} does not match command {args.command!r}")
    doc = cfg.to_dict()
    if args.seeds:
        doc["seeds"] = args.seeds
    if args.out:
        doc["out"] = args.out
    if args.format:
        doc["format"] = args.format
    if args.command == "accountant":
        params = dict(doc["params"])
        for name, _ in _ACCOUNTANT_FLAGS:
            if getattr(args, name) is not None:
                params[name] = getattr(args, name)
        if args.mode:
            params["mode"] = args.mode
        doc["params"] = params
    return ExperimentConfig.from_dict(doc)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "presets":
        for name in sorted(PRESETS):
            doc = PRESETS[name]
            print(f"{name}\t{doc['kind']}\t{json.dumps(doc, sort_keys=True)}")
        return EXIT_OK
    try:
        cfg = _config_from_args(args)
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            report = run_experiment(cfg)
        if cfg.kind == "accountant" and cfg.format == "json" and cfg.out is None:
            budget = report.privacy
            print(json.dumps({k: budget[k] for k in ("alpha_star", "epsilon", "delta")}, sort_keys=True))
            return EXIT_OK
        text = emit_report(report, cfg.format, cfg.out)
        if cfg.out is None:
            sys.stdout.write(text)
    except DivergenceError as exc:
        print(f"fedbayes: numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (ConfigError, NoBudgetError, ValueError, FedBayesError) as exc:
        print(f"fedbayes: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
