"""Command-line front end: ``precond <command>``.

Commands
--------
train              train a toy task, emit a RunRecord CSV and a checkpoint
check-equivalence  lockstep ambient-vs-rotated parametrization check
cost-audit         exact ledger accounting for both parametrizations
bench-decomp       decomposition micro-benchmarks (CSV)
ckpt-dump          print checkpoint header and tensor metadata

Flags can also come from a flat ``key=value`` config file (``--config``);
command-line flags override file values, and unknown keys in the file are
hard errors. Exit codes: 0 ok, 2 bad config, 3 numerical failure,
4 check violation.
"""

from __future__ import annotations

import argparse
import sys
from fractions import Fraction

from .harness import (
    EXIT_CONFIG,
    EXIT_NUMERIC,
    EXIT_OK,
    EXIT_VIOLATION,
    SCHEDULES,
    bench_decomp,
    bench_ordering_violations,
    check_equivalence,
    cost_audit,
    format_bench_csv,
    run_training,
    write_records_csv,
    TrainingNumericsError,
)
from .checkpoint import (
    CheckpointFormatError,
    checkpoint_save,
    describe,
)
from .matcore import Precision
from .shampoo import BasisSolver, Method, OptimConfig, Parametrization, Selection
from .tasks import TASK_KINDS


class ConfigError(ValueError):
    pass


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_dims(text: str) -> tuple:
    try:
        dims = tuple(int(part) for part in text.lower().split("x"))
    except ValueError as err:
        raise ConfigError(f"bad dims {text!r}: expected e.g. 8x12") from err
    if not dims or any(d < 1 for d in dims):
        raise ConfigError(f"bad dims {text!r}: entries must be >= 1")
    return dims


def _parse_int_list(text: str) -> list:
    return [int(p) for p in text.split(",") if p.strip()]


def _parse_fraction_list(text: str) -> list:
    return [Fraction(p.strip()) for p in text.split(",") if p.strip()]


# Canonical key table: every config-file key, its parser, and its default.
_KEYS = {
    "method": (str, "kl-shampoo"),
    "param": (str, "new"),
    "precision": (str, "fp32"),
    "T": (int, 10),
    "B": (Fraction, Fraction(1)),
    "K": (int, 1),
    "select": (str, "full"),
    "basis": (str, "qr"),
    "lr": (float, 1e-2),
    "beta1": (float, 0.1),
    "beta2": (float, 0.05),
    "damping": (float, 1e-8),
    "wd": (float, 0.0),
    "steps": (int, 100),
    "seed": (int, 0),
    "task": (str, "quadratic"),
    "out": (str, None),
    "ckpt-out": (str, None),
    "refresh-lambda": (_parse_bool, False),
    "rotate-v": (str, "none"),
    "parallel-layers": (_parse_bool, False),
    "schedule": (str, "const"),
    "lr-min": (float, 0.0),
    "warmup-frac": (float, 0.1),
    "dims": (str, None),
    "batch-size": (int, 32),
    "noise-scale": (float, 0.0),
    "sizes": (str, "64,128,512"),
    "fractions": (str, "1/4,1/2"),
    "reps": (int, 3),
}


def load_config_file(path) -> dict:
    """Flat key=value file; '#' comments; unknown keys are hard errors."""
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
            key, _, val = line.partition("=")
            key = key.strip()
            val = val.strip()
            if key not in _KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            parser, _ = _KEYS[key]
            try:
                values[key] = parser(val)
            except (ValueError, ConfigError) as err:
                raise ConfigError(f"{path}:{lineno}: bad value for {key!r}: {err}") from err
    return values


def merge_options(args: argparse.Namespace, command_defaults: dict | None = None) -> dict:
    """defaults <- per-command defaults <- config file <- explicit CLI flags."""
    opts = {key: default for key, (_, default) in _KEYS.items()}
    if command_defaults:
        opts.update(command_defaults)
    config_path = getattr(args, "config", None)
    if config_path:
        opts.update(load_config_file(config_path))
    for key in _KEYS:
        attr = key.replace("-", "_")
        val = getattr(args, attr, None)
        if val is not None:
            opts[key] = val
    return opts


def build_optim_config(opts: dict) -> OptimConfig:
    try:
        return OptimConfig(
            gamma=opts["lr"],
            beta2=opts["beta2"],
            beta1=opts["beta1"],
            damping=opts["damping"],
            interval_t=opts["T"],
            subspace_fraction=Fraction(opts["B"]),
            inner_steps_k=opts["K"],
            method=Method(opts["method"]),
            parametrization=Parametrization(opts["param"]),
            selection=Selection(opts["select"]),
            basis_solver=BasisSolver(opts["basis"]),
            storage=Precision(opts["precision"]),
            weight_decay=opts["wd"],
            seed=opts["seed"],
            refresh_lambda=opts["refresh-lambda"],
            rotate_second_moment=_rotate_v(opts["rotate-v"]),
        )
    except ValueError as err:
        raise ConfigError(str(err)) from err


def _rotate_v(value: str) -> bool:
    if value not in ("none", "approx"):
        raise ConfigError(f"--rotate-v must be 'none' or 'approx', got {value!r}")
    return value == "approx"


def _add_optim_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--method", choices=[m.value for m in Method])
    p.add_argument("--param", choices=[m.value for m in Parametrization])
    p.add_argument("--precision", choices=[m.value for m in Precision])
    p.add_argument("--T", type=int, dest="T")
    p.add_argument("--B", type=Fraction)
    p.add_argument("--K", type=int, dest="K")
    p.add_argument("--select", choices=[m.value for m in Selection])
    p.add_argument("--basis", choices=[m.value for m in BasisSolver])
    p.add_argument("--lr", type=float)
    p.add_argument("--beta1", type=float)
    p.add_argument("--beta2", type=float)
    p.add_argument("--damping", type=float)
    p.add_argument("--wd", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--refresh-lambda", action="store_const", const=True, default=None)
    p.add_argument("--rotate-v", choices=["none", "approx"])
    p.add_argument("--parallel-layers", action="store_const", const=True, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="precond",
        description="Shampoo-family preconditioned optimizers: training harness, "
                    "equivalence and cost checks, decomposition benchmarks.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a toy task, write CSV + checkpoint")
    _add_optim_flags(p_train)
    p_train.add_argument("--task", choices=TASK_KINDS)
    p_train.add_argument("--dims", help="task dims, e.g. 8x6 or 64x48x16")
    p_train.add_argument("--out", help="CSV output path (default train.csv)")
    p_train.add_argument("--ckpt-out", help="checkpoint path (default: out with .ckpt)")
    p_train.add_argument("--schedule", choices=SCHEDULES)
    p_train.add_argument("--lr-min", type=float)
    p_train.add_argument("--warmup-frac", type=float)
    p_train.add_argument("--batch-size", type=int)
    p_train.add_argument("--noise-scale", type=float)
    p_train.set_defaults(func=cmd_train)

    p_eq = sub.add_parser("check-equivalence",
                          help="lockstep ambient-vs-rotated trajectory check")
    p_eq.add_argument("--config", help="flat key=value config file")
    p_eq.add_argument("--dims", help="layer dims, e.g. 8x12 (default)")
    p_eq.add_argument("--steps", type=int)
    p_eq.add_argument("--T", type=int, dest="T")
    p_eq.add_argument("--seed", type=int)
    p_eq.add_argument("--method", choices=[m.value for m in Method])
    p_eq.add_argument("--inject", choices=["skip-companion-rotation",
                                           "no-sign-fix-old", "no-sign-fix-new"],
                      help=argparse.SUPPRESS)
    p_eq.set_defaults(func=cmd_check_equivalence)

    p_audit = sub.add_parser("cost-audit", help="exact mm/smm ledger accounting")
    p_audit.add_argument("--config", help="flat key=value config file")
    p_audit.add_argument("--dims", help="layer dims, e.g. 8x8")
    p_audit.add_argument("--T", dest="T_list", help="comma list of intervals, e.g. 2,5,10")
    p_audit.add_argument("--steps", type=int)
    p_audit.add_argument("--B", type=Fraction)
    p_audit.add_argument("--K", type=int, dest="K")
    p_audit.add_argument("--select", choices=["random", "greedy"])
    p_audit.set_defaults(func=cmd_cost_audit)

    p_bench = sub.add_parser("bench-decomp", help="decomposition micro-benchmarks")
    p_bench.add_argument("--config", help="flat key=value config file")
    p_bench.add_argument("--sizes", help="comma list of matrix sizes")
    p_bench.add_argument("--fractions", help="comma list of subspace fractions")
    p_bench.add_argument("--precision", choices=[m.value for m in Precision])
    p_bench.add_argument("--reps", type=int)
    p_bench.add_argument("--out", help="CSV output path (default stdout)")
    p_bench.set_defaults(func=cmd_bench_decomp)

    p_dump = sub.add_parser("ckpt-dump", help="print checkpoint metadata")
    p_dump.add_argument("path")
    p_dump.set_defaults(func=cmd_ckpt_dump)
    return parser


def cmd_train(args) -> int:
    opts = merge_options(args)
    config = build_optim_config(opts)
    if opts["schedule"] not in SCHEDULES:
        raise ConfigError(f"unknown schedule {opts['schedule']!r}")
    if opts["task"] not in TASK_KINDS:
        raise ConfigError(f"unknown task {opts['task']!r}")
    dims = _parse_dims(opts["dims"]) if opts["dims"] else None
    out = opts["out"] or "train.csv"
    ckpt_out = opts["ckpt-out"] or (out.rsplit(".", 1)[0] + ".ckpt")
    try:
        records, states, _ = run_training(
            config,
            task_kind=opts["task"],
            dims=dims,
            steps=opts["steps"],
            seed=opts["seed"],
            schedule=opts["schedule"],
            gamma_min=opts["lr-min"],
            warmup_frac=opts["warmup-frac"],
            batch_size=opts["batch-size"],
            noise_scale=opts["noise-scale"],
            parallel_layers=opts["parallel-layers"],
        )
    except TrainingNumericsError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    write_records_csv(out, records)
    checkpoint_save(ckpt_out, states)
    last = records[-1]
    print(f"{opts['task']}: {len(records)} steps, final train_loss={last.train_loss:.6g} "
          f"eval_loss={last.eval_loss:.6g}")
    print(f"wrote {out} and {ckpt_out}")
    return EXIT_OK


def cmd_check_equivalence(args) -> int:
    opts = merge_options(args, command_defaults={"steps": 200, "T": 5, "dims": "8x12"})
    dims = _parse_dims(opts["dims"])
    if len(dims) != 2:
        raise ConfigError(f"check-equivalence needs 2-D dims, got {dims}")
    report = check_equivalence(
        dims[0], dims[1],
        steps=opts["steps"],
        interval=opts["T"],
        seed=opts["seed"],
        method=Method(opts["method"]),
        inject=getattr(args, "inject", None),
    )
    print(f"dims={report.d1}x{report.d2} T={report.interval} steps={report.steps}")
    print(f"max relative theta deviation : {report.max_theta_dev:.3e} "
          f"(tolerance {report.theta_tol:.0e})")
    print(f"max |P - Q^T S Q|            : {report.max_companion_dev:.3e} "
          f"(tolerance {report.companion_tol:.0e})")
    if report.passed:
        print("equivalence check PASSED")
        return EXIT_OK
    print("equivalence check FAILED")
    return EXIT_VIOLATION


def cmd_cost_audit(args) -> int:
    opts = merge_options(args)
    dims = _parse_dims(opts["dims"]) if opts["dims"] else (8, 8)
    if len(dims) != 2:
        raise ConfigError(f"cost-audit needs 2-D dims, got {dims}")
    intervals = _parse_int_list(args.T_list) if args.T_list else [2, 3, 4, 5, 6, 7, 8, 9, 10]
    fraction = opts["B"] if opts["B"] != 1 else None
    result = cost_audit(
        dims[0], dims[1], intervals, steps=opts["steps"],
        subspace_fraction=fraction,
        inner_steps_k=opts["K"],
        selection=Selection(opts["select"]) if opts["select"] != "full" else Selection.RANDOM,
    )
    print("T,steps,mm_old,mm_new,mm_old_expected,mm_new_expected,smm_new,smm_fraction_new")
    for row in result.rows:
        print(f"{row.interval},{row.steps},{row.mm_old},{row.mm_new},"
              f"{row.mm_old_expected},{row.mm_new_expected},{row.smm_new},"
              f"{row.smm_fraction_new!r}")
    for row in result.rows:
        if row.interval == 1:
            print(f"note: T=1 rotated parametrization costs more "
                  f"({row.mm_new} vs {row.mm_old} mm); advantage needs T >= 2")
    if result.violations:
        for v in result.violations:
            print(f"VIOLATION: {v}", file=sys.stderr)
        return EXIT_VIOLATION
    print("cost audit PASSED")
    return EXIT_OK


def cmd_bench_decomp(args) -> int:
    opts = merge_options(args)
    sizes = _parse_int_list(opts["sizes"])
    fractions = _parse_fraction_list(opts["fractions"])
    if any(d < 2 for d in sizes):
        raise ConfigError("bench sizes must be >= 2")
    rows = bench_decomp(sizes, fractions, precision=Precision(opts["precision"]),
                        reps=opts["reps"])
    csv_text = format_bench_csv(rows)
    if opts["out"]:
        with open(opts["out"], "w", newline="") as fh:
            fh.write(csv_text)
        print(f"wrote {opts['out']}")
    else:
        print(csv_text, end="")
    violations = bench_ordering_violations(rows)
    if violations:
        for v in violations:
            print(f"VIOLATION: {v}", file=sys.stderr)
        return EXIT_VIOLATION
    return EXIT_OK


def cmd_ckpt_dump(args) -> int:
    try:
        meta = describe(args.path)
    except CheckpointFormatError as err:
        print(f"format error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"checkpoint version {meta['version']}, {meta['layer_count']} layer(s)")
    for i, layer in enumerate(meta["layers"]):
        print(f"layer {i}: method={layer['method']} parametrization={layer['parametrization']}")
        for t in layer["tensors"]:
            shape = "x".join(str(s) for s in t["shape"]) or "scalar"
            print(f"  {t['name']:<12} {t['dtype']:<5} {shape}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as err:
        print(f"file not found: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
