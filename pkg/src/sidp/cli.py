"""Command-line entry point: ``sidp train|sweep|variance-demo|accountant|report``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .accountant import CalibrationError, calibrate_z, compose_and_convert, ledger_for
from .experiments import (ConfigError, ExperimentConfig, SchemaError, emit_report,
                          run_experiment, sweep, variance_demo)


def _load(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    changes = {}
    if args.seed is not None:
        changes["seeds"] = (args.seed,)
    if args.out is not None:
        changes["out"] = args.out
    if args.data_dir is not None:
        changes["data_dir"] = args.data_dir
    return replace(cfg, **changes).validate()


def _print_summary(s) -> None:
    status = "ok" if s.all_converged else "no-convergence" if not any(s.converged) else "partial"
    eps = "inf" if s.epsilon == float("inf") else f"{s.epsilon:.4f}"
    print(f"run_id={s.run_id} accuracy={s.mean_accuracy:.4f} se={s.se_accuracy:.4f} "
          f"epsilon={eps} status={status} metrics={s.csv_path}")


def cmd_train(args) -> int:
    _print_summary(run_experiment(_load(args)))
    return 0


def cmd_sweep(args) -> int:
    cfg = _load(args)
    results = sweep(cfg, jobs=args.jobs)
    for s in results:
        _print_summary(s)
    report = emit_report([s.json_path for s in results])
    sys.stdout.write(report.to_text())
    out = Path(cfg.out)
    (out / f"{cfg.name}-report.csv").write_text(report.to_csv())
    return 0


def cmd_variance(args) -> int:
    table = variance_demo(args.steps, args.trials, lr=args.lr, clip_norm=args.clip,
                          z=args.z, lot_size=args.lot_size, seed=args.seed or 0)
    text = table.to_csv()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    print(f"unit={table.unit:.6g} slope={table.slope:.6g} r2={table.r2:.6f}", file=sys.stderr)
    return 0


def cmd_accountant(args) -> int:
    if args.target_eps is not None:
        z = calibrate_z(args.target_eps, args.delta, args.q, args.steps,
                        conversion=args.conversion)
        eps, order = compose_and_convert(ledger_for(args.q, z, args.steps), args.delta,
                                         args.conversion)
        print(f"z={z:.6f} epsilon={eps:.6f} order={order:g} q={args.q:g} steps={args.steps} "
              f"delta={args.delta:g}")
    else:
        if args.z is None:
            raise SystemExit("accountant: give --z or --target-eps")
        eps, order = compose_and_convert(ledger_for(args.q, args.z, args.steps), args.delta,
                                         args.conversion)
        print(f"epsilon={eps:.6f} order={order:g} z={args.z:g} q={args.q:g} steps={args.steps} "
              f"delta={args.delta:g}")
    return 0


def cmd_report(args) -> int:
    report = emit_report(args.files)
    sys.stdout.write(report.to_text())
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(report.to_csv())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sidp", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", required=True, help="INI experiment config")
        sp.add_argument("--seed", type=int, help="override the seed list with one seed")
        sp.add_argument("--out", help="output directory (or file for variance-demo/report)")
        sp.add_argument("--data-dir", help="directory with train/t10k IDX files")

    sp = sub.add_parser("train", help="run one experiment config")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("sweep", help="run a config over its [sweep] values")
    common(sp)
    sp.add_argument("--jobs", type=int, default=1, help="parallel runs (one thread each)")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("variance-demo", help="Var(theta_t - theta_0) under zero gradients")
    common(sp, config=False)
    sp.add_argument("--steps", type=int, default=50)
    sp.add_argument("--trials", type=int, default=10_000)
    sp.add_argument("--lr", type=float, default=0.1)
    sp.add_argument("--clip", type=float, default=1.0)
    sp.add_argument("--z", type=float, default=1.0)
    sp.add_argument("--lot-size", type=int, default=256)
    sp.set_defaults(func=cmd_variance)

    sp = sub.add_parser("accountant", help="epsilon for (z, q, steps) or z for a target epsilon")
    sp.add_argument("--z", type=float)
    sp.add_argument("--q", type=float, required=True)
    sp.add_argument("--steps", type=int, required=True)
    sp.add_argument("--delta", type=float, default=1e-5)
    sp.add_argument("--target-eps", type=float)
    sp.add_argument("--conversion", choices=("improved", "classic"), default="improved")
    sp.set_defaults(func=cmd_accountant)

    sp = sub.add_parser("report", help="comparison table from metrics files")
    sp.add_argument("files", nargs="+")
    sp.add_argument("--out", help="write the CSV table here")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, SchemaError, CalibrationError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
