"""Command-line experiment runner.

Subcommands: ``train``, ``figure1``, ``probe``, ``gradcheck``,
``mechanism-adding``, ``mechanism-copy``. Exit codes: 0 success, 2 config
error, 3 diverged training run.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields

import numpy as np

from . import mechanisms, tasks
from .experiment import (
    ConfigError,
    ExperimentConfig,
    run_activation_probe,
    run_figure1,
    run_training,
)
from .linalg import make_rng
from .models import ltrnn_forward
from .training import grad_check, standard_params

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3

_CONFIG_FIELDS = {f.name for f in fields(ExperimentConfig)}


def parse_config(args: argparse.Namespace) -> ExperimentConfig:
    """Merge config-file values and command-line flags (flags win)."""
    merged: dict = {}
    if getattr(args, "config", None):
        with open(args.config) as f:
            loaded = json.load(f)
        unknown = set(loaded) - _CONFIG_FIELDS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        merged.update(loaded)
    for name in _CONFIG_FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            merged[name] = value
    if getattr(args, "no_clip", False):
        merged["clip_l"] = None
    if getattr(args, "no_normalize", False):
        merged["normalize_by_T"] = False
    return ExperimentConfig(**merged).resolved()


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of config values; flags override")
    p.add_argument("--task", choices=["copy", "varcopy", "adding"])
    p.add_argument("--model", choices=["lt-ornn", "lt-irnn", "lstm",
                                       "lstm-peephole", "pooled-ornn"])
    p.add_argument("--T", type=int)
    p.add_argument("--S", type=int)
    p.add_argument("--K", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--max-updates", dest="max_updates", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--clip-l", dest="clip_l", type=float)
    p.add_argument("--no-clip", action="store_true", help="disable activation clipping")
    p.add_argument("--no-normalize", action="store_true",
                   help="disable the 1/T gradient normalization")
    p.add_argument("--normalize-variant", dest="normalize_variant",
                   choices=["hidden-inject", "param-scale"])
    p.add_argument("--ortho-penalty", dest="ortho_penalty", action="store_const", const=True)
    p.add_argument("--penalty-m", dest="penalty_m", type=int)
    p.add_argument("--penalty-step", dest="penalty_step", type=float)
    p.add_argument("--pool", type=int)
    p.add_argument("--nonlinearity", choices=["identity", "relu", "tanh"])
    p.add_argument("--marker-scheme", dest="marker_scheme",
                   choices=["halves", "uniform-pair"])
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--eval-size", dest="eval_size", type=int)
    p.add_argument("--stop-below-eval", dest="stop_below_eval", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ornnlab",
        description="Synthetic long-memory tasks: training runs, analytic "
                    "solution sweeps, activation probes, gradient checks.")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("train", help="run one seeded training experiment")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="metrics CSV path")
    p.add_argument("--save-checkpoint", dest="save_checkpoint",
                   help="write final parameters to this path")
    p.add_argument("--no-timing", action="store_true",
                   help="write 0.0 wall seconds for byte-reproducible CSVs")

    p = sub.add_parser("figure1", help="mechanism success sweep over (K, S)")
    p.add_argument("--out", required=True)
    p.add_argument("--d", type=int, default=128)
    p.add_argument("--T", type=int, default=500)
    p.add_argument("--trials", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("probe", help="per-step activations of a checkpoint on one sample")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--task", choices=["copy", "varcopy", "adding"], default="adding")
    p.add_argument("--T", type=int, default=100)
    p.add_argument("--S", type=int, default=10)
    p.add_argument("--K", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("gradcheck", help="finite-difference checks for every architecture")
    p.add_argument("--hidden", type=int, default=8)
    p.add_argument("--T", type=int, default=20)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("mechanism-adding", help="verify the exact adder")
    p.add_argument("--T", type=int, default=750)
    p.add_argument("--samples", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--save-checkpoint", dest="save_checkpoint")

    p = sub.add_parser("mechanism-copy", help="success rate of the rotation memory")
    p.add_argument("--d", type=int, default=128)
    p.add_argument("--K", type=int, default=8)
    p.add_argument("--S", type=int, default=10)
    p.add_argument("--T", type=int, default=500)
    p.add_argument("--trials", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _cmd_train(args) -> int:
    config = parse_config(args)
    records = run_training(config, args.out, timing=not args.no_timing,
                           save_checkpoint=args.save_checkpoint)
    if records and records[-1].flag == "diverged":
        print(f"diverged at update {records[-1].update}; metrics in {args.out}",
              file=sys.stderr)
        return EXIT_DIVERGED
    print(f"done: {len(records)} evaluations written to {args.out}")
    return EXIT_OK


def _cmd_figure1(args) -> int:
    rows = run_figure1(args.out, d=args.d, T=args.T, trials=args.trials, seed=args.seed)
    print(f"wrote {len(rows)} grid points to {args.out}")
    return EXIT_OK


def _cmd_probe(args) -> int:
    run_activation_probe(args.checkpoint, args.task, args.T, args.out,
                         S=args.S, K=args.K, seed=args.seed)
    print(f"wrote activation trace to {args.out}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    rng = make_rng(args.seed, 0)
    copy_cfg = tasks.CopyConfig(K=3, S=2, T=args.T)
    adding_cfg = tasks.AddingConfig(T=args.T)
    copy_sample = tasks.gen_copy(copy_cfg, rng)
    adding_sample = tasks.gen_adding(adding_cfg, rng)
    failed = False
    for arch, peephole in (("ltrnn", False), ("srnn", False),
                           ("lstm", True), ("pooled", False)):
        for sample, n_in, n_out in ((copy_sample, copy_cfg.num_classes, copy_cfg.num_classes),
                                    (adding_sample, 2, 1)):
            params = standard_params(arch, n_in, args.hidden, n_out, rng,
                                     nonlinearity="tanh", peephole=peephole)
            report = grad_check(params, sample, tolerance=args.tolerance)
            task_name = "copy" if sample is copy_sample else "adding"
            print(f"{arch:7s} {task_name:7s} max rel err {report.max_rel_err:.3e} "
                  f"-> {report.status}")
            failed = failed or report.status == "fail"
    return 1 if failed else EXIT_OK


def _cmd_mechanism_adding(args) -> int:
    params = mechanisms.build_adding_mechanism()
    rng = make_rng(args.seed, 0)
    cfg = tasks.AddingConfig(T=args.T)
    values, markers, targets = tasks.gen_adding_batch(cfg, rng, args.samples)
    x = np.stack([values.T, markers.T.astype(np.float64)], axis=2)
    trace = ltrnn_forward(params, x)
    err = float(np.abs(trace.y[-1, :, 0] - targets).max())
    print(f"max |output - target| over {args.samples} samples at T={args.T}: {err:.3e}")
    if args.save_checkpoint:
        from .models import save_params
        save_params(args.save_checkpoint, params)
        print(f"checkpoint written to {args.save_checkpoint}")
    return EXIT_OK


def _cmd_mechanism_copy(args) -> int:
    rows = mechanisms.success_sweep(args.d, args.T, [args.K], [args.S],
                                    args.trials, args.seed)
    row = rows[0]
    print(f"K={args.K} S={args.S} d={args.d} T={args.T}: "
          f"replay success {row['rate']:.3f} "
          f"(with waiting span {row['rate_strict']:.3f}) over {args.trials} trials")
    return EXIT_OK


_COMMANDS = {
    "train": _cmd_train,
    "figure1": _cmd_figure1,
    "probe": _cmd_probe,
    "gradcheck": _cmd_gradcheck,
    "mechanism-adding": _cmd_mechanism_adding,
    "mechanism-copy": _cmd_mechanism_copy,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
