"""Command-line interface: ``python -m dynsel <command> --config cfg.json``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import binio
from . import harness as hx


def _config(args) -> hx.ExperimentConfig:
    if args.config is None:
        raise hx.ConfigError("--config is required for this command")
    cfg = hx.ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg.seeds = [args.seed]
    return cfg


def _train(args) -> int:
    cfg = _config(args)
    for seed in cfg.seeds:
        print(hx.cmd_train(cfg, seed, args.out))
    return 0


def _eval(args) -> int:
    cfg = _config(args)
    for seed in cfg.seeds:
        rows = hx.cmd_eval(cfg, seed, args.out, args.checkpoint, args.bank, trace=args.trace)
        sys.stdout.write(hx.rows_to_csv(rows))
    return 0


def _sweep(args) -> int:
    cfg = _config(args)
    rows = hx.cmd_sweep_noisy_recovery(cfg, args.out, trace=args.trace)
    sys.stdout.write(hx.rows_to_csv(rows))
    return 0


def _mi(args) -> int:
    report = hx.cmd_mi_bound_check(args.trials, seed=args.seed or 0)
    print(json.dumps(report, indent=1))
    return 0 if report["passed"] else 1


def _loss_range(args) -> int:
    cfg = _config(args)
    status = 0
    for seed in cfg.seeds:
        target = hx.run_dir(cfg, seed, args.out)
        model, bank = hx.load_artifacts(
            args.checkpoint or target / "checkpoint.bin", args.bank or target / "bank.bin"
        )
        report = hx.cmd_loss_range(model, bank, hx.load_data(cfg), args.delta or cfg.delta)
        print(json.dumps({"seed": seed, **report}, sort_keys=True))
    return status


def _gen_data(args) -> int:
    cfg = _config(args)
    print(hx.cmd_gen_data(cfg, args.out, args.seed))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynsel", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    cmds = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = cmds.add_parser(name, help=help_text)
        p.add_argument("--config", help="experiment config (JSON)")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("--seed", type=int, help="run only this seed")
        p.add_argument("--trace", action="store_true", help="export selection traces as JSONL")
        p.set_defaults(func=func)
        return p

    add("train", _train, "train a model and build its prototype bank")
    p = add("eval", _eval, "evaluate selection modes over the config grid")
    p.add_argument("--checkpoint")
    p.add_argument("--bank")
    add("sweep-noisy-recovery", _sweep, "sweep the oracle correct-recovery rate")
    p = add("mi-bound-check", _mi, "check the MI / cross-entropy bound on random discrete joints")
    p.add_argument("--trials", type=int, default=100)
    p = add("loss-range", _loss_range, "per-sample test loss range and Hoeffding term")
    p.add_argument("--checkpoint")
    p.add_argument("--bank")
    p.add_argument("--delta", type=float)
    add("gen-data", _gen_data, "generate and save a synthetic dataset")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (hx.ConfigError, hx.IncompatibleArtifactsError, binio.FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
