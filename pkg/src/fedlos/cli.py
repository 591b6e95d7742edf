"""Command-line interface.

Subcommands: `cohort gen|export`, `recruit`, `train central|federated`,
`experiment run|sweep|selfcheck`, `report`. Exit codes: 0 on success, 2 on
configuration/usage errors, 3 on runtime errors. Relative output paths
resolve under $FEDLOS_OUTPUT_ROOT when it is set.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .cohort import (
    CohortSpec,
    client_reports,
    export_csv,
    generate_cohort,
    load_cohort,
    save_cohort,
)
from .fed import FederationConfig, run_central, run_federated
from .harness import (
    ConfigError,
    DEFAULT_COHORT_SEED,
    ExperimentConfig,
    emit_plot_data,
    load_config,
    resolve_run_dir,
    run_experiment,
    selfcheck,
    sweep_gamma_th,
)
from .metrics import evaluate
from .nnet import TrainHyper, save_checkpoint
from .recruit import RecruitmentConfig, preset as recruit_preset, recruit


def _parse_seeds(text: str) -> tuple[int, ...]:
    try:
        seeds = tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError as exc:
        raise ConfigError(f"bad seed list {text!r}: {exc}") from exc
    if not seeds:
        raise ConfigError("seed list is empty")
    return seeds


def _parse_grid(text: str) -> tuple[float, ...]:
    # Either "start:stop:step" or a comma-separated list.
    try:
        if ":" in text:
            start, stop, step = (float(p) for p in text.split(":"))
            count = int(round((stop - start) / step)) + 1
            return tuple(round(start + k * step, 10) for k in range(count))
        return tuple(float(p) for p in text.split(",") if p.strip())
    except ValueError as exc:
        raise ConfigError(f"bad gamma_th grid {text!r}: {exc}") from exc


def _cohort_spec_from_args(args: argparse.Namespace) -> CohortSpec:
    fractions = tuple(float(p) for p in args.split_fractions.split(","))
    if len(fractions) != 3:
        raise ConfigError("--split-fractions needs three comma-separated values")
    try:
        return CohortSpec(
            n_clients=args.n_clients,
            total_stays=args.total_stays,
            split_fractions=fractions,  # type: ignore[arg-type]
            target_mean=args.target_mean,
            target_median=args.target_median,
            f_t=args.f_t,
            f_s=args.f_s,
            size_dispersion=args.size_dispersion,
            shift_strength=args.shift_strength,
            noise_sd=args.noise_sd,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _add_cohort_spec_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--n-clients", type=int, default=189)
    parser.add_argument("--total-stays", type=int, default=89127)
    parser.add_argument("--split-fractions", default="0.70,0.15,0.15")
    parser.add_argument("--target-mean", type=float, default=3.69)
    parser.add_argument("--target-median", type=float, default=2.27)
    parser.add_argument("--f-t", type=int, default=20)
    parser.add_argument("--f-s", type=int, default=18)
    parser.add_argument("--size-dispersion", type=float, default=0.8)
    parser.add_argument("--shift-strength", type=float, default=0.6)
    parser.add_argument("--noise-sd", type=float, default=0.3)


def _recruitment_from_args(args: argparse.Namespace) -> RecruitmentConfig:
    if args.preset:
        try:
            return recruit_preset(args.preset, gamma_th=args.gamma_th)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    try:
        return RecruitmentConfig(
            gamma_dv=args.gamma_dv, gamma_sa=args.gamma_sa, gamma_th=args.gamma_th
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _cmd_cohort_gen(args: argparse.Namespace) -> int:
    spec = _cohort_spec_from_args(args)
    cohort = generate_cohort(spec, args.seed)
    save_cohort(cohort, args.out)
    print(f"wrote cohort of {cohort.total_stays()} stays across "
          f"{len(cohort.clients)} clients to {args.out}")
    return 0


def _cmd_cohort_export(args: argparse.Namespace) -> int:
    cohort = load_cohort(args.cohort)
    export_csv(cohort, args.csv)
    print(f"exported {cohort.total_stays()} rows to {args.csv}")
    return 0


def _cmd_recruit(args: argparse.Namespace) -> int:
    cfg = _recruitment_from_args(args)
    cohort = load_cohort(args.cohort)
    result = recruit(client_reports(cohort), cfg)
    Path(args.out).write_text(json.dumps(result.to_json_dict(), indent=2, sort_keys=True))
    print(f"recruited {len(result.recruited)} of {len(result.scores)} clients "
          f"(threshold {result.threshold:.6g}); report at {args.out}")
    return 0


def _cmd_train_central(args: argparse.Namespace) -> int:
    cohort = load_cohort(args.cohort)
    out_dir = resolve_run_dir(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    params, logs = run_central(cohort, TrainHyper(), epochs=args.epochs, seed=args.seed)
    _write_logs_and_checkpoint(out_dir, params, logs, seed=args.seed)
    tau = logs[-1].cumulative_seconds if logs else 0.0
    report = evaluate(params, cohort.global_test, preset="central-cli",
                      seed=args.seed, tau_seconds=tau)
    print(f"central: {args.epochs} epochs in {tau:.2f}s; "
          f"test MSLE {report.msle:.4f}, MAE {report.mae:.4f}")
    return 0


def _cmd_train_federated(args: argparse.Namespace) -> int:
    cohort = load_cohort(args.cohort)
    out_dir = resolve_run_dir(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    members = cohort.client_ids
    if args.recruit_report:
        report_payload = json.loads(Path(args.recruit_report).read_text())
        members = sorted(int(c) for c in report_payload["recruited"])
    try:
        fed_cfg = FederationConfig(
            rounds=args.rounds,
            local_epochs=args.local_epochs,
            participation_fraction=args.fraction,
            aggregation=args.aggregation,
            selection_seed=args.selection_seed,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    params, logs = run_federated(cohort, members, fed_cfg, TrainHyper(), seed=args.seed)
    _write_logs_and_checkpoint(out_dir, params, logs, seed=args.seed)
    tau = logs[-1].cumulative_seconds if logs else 0.0
    report = evaluate(params, cohort.global_test, preset="federated-cli",
                      seed=args.seed, tau_seconds=tau)
    print(f"federated: {args.rounds} rounds x {args.local_epochs} epochs over "
          f"{len(members)} members in {tau:.2f}s; "
          f"test MSLE {report.msle:.4f}, MAE {report.mae:.4f}")
    return 0


def _write_logs_and_checkpoint(out_dir: Path, params, logs, seed: int) -> None:
    with open(out_dir / "rounds.jsonl", "w", encoding="utf-8") as fh:
        for log in logs:
            fh.write(json.dumps(log.to_json_dict()) + "\n")
    save_checkpoint(params, out_dir / "checkpoint.bin", hyper=TrainHyper(),
                    meta={"seed": seed})


def _experiment_config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    if args.config:
        cfg = load_config(args.config)
    elif args.preset:
        cfg = ExperimentConfig.from_preset(args.preset, output_dir=args.output_dir or "run")
    else:
        raise ConfigError("provide --config or --preset")

    # CLI flags override file/preset values.
    updates: dict = {}
    if args.output_dir:
        updates["output_dir"] = args.output_dir
    if args.seeds:
        updates["seeds"] = _parse_seeds(args.seeds)
    if args.cohort:
        updates["cohort_path"] = args.cohort
        updates["cohort_spec"] = None
    if args.cohort_seed is not None:
        updates["cohort_seed"] = args.cohort_seed
    if args.grid:
        updates["gamma_grid"] = _parse_grid(args.grid)

    try:
        fed_updates: dict = {}
        if args.rounds is not None:
            fed_updates["rounds"] = args.rounds
        if args.local_epochs is not None:
            fed_updates["local_epochs"] = args.local_epochs
        if args.fraction is not None:
            fed_updates["participation_fraction"] = args.fraction
        if fed_updates:
            updates["federation"] = replace(cfg.federation, **fed_updates)

        if args.gamma_th is not None:
            if cfg.recruitment is None:
                raise ConfigError(f"preset {cfg.preset} does not take a gamma_th")
            updates["recruitment"] = replace(cfg.recruitment, gamma_th=args.gamma_th)
        if args.epochs is not None:
            updates["central_epochs"] = args.epochs
        return replace(cfg, **updates) if updates else cfg
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _cmd_experiment_run(args: argparse.Namespace) -> int:
    cfg = _experiment_config_from_args(args)
    run_dir = run_experiment(cfg)
    print(f"run complete: {run_dir}")
    return 0


def _cmd_experiment_sweep(args: argparse.Namespace) -> int:
    cfg = _experiment_config_from_args(args)
    if cfg.preset != "sweep-gamma-th":
        cfg = replace(cfg, preset="sweep-gamma-th",
                      recruitment=cfg.recruitment or recruit_preset("balanced"))
    rows, run_dir = sweep_gamma_th(cfg)
    print(f"sweep complete: {len(rows)} rows at {run_dir / 'sweep.csv'}")
    return 0


def _cmd_experiment_selfcheck(args: argparse.Namespace) -> int:
    problems = selfcheck(args.run_dir)
    if problems:
        for problem in problems:
            print(f"PROBLEM: {problem}", file=sys.stderr)
        return 3
    print(f"{args.run_dir}: all expected artifacts present")
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    run_dir = Path(args.run_dir)
    summary = run_dir / "summary.csv"
    if summary.exists():
        print(summary.read_text().rstrip())
    outputs = emit_plot_data(run_dir)
    print("plot data:")
    for path in outputs:
        print(f"  {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedlos",
        description="Federated length-of-stay training with client recruitment.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    cohort_cmd = sub.add_parser("cohort", help="generate or export synthetic cohorts")
    cohort_sub = cohort_cmd.add_subparsers(dest="subcommand", required=True)
    gen = cohort_sub.add_parser("gen", help="generate a cohort file")
    _add_cohort_spec_flags(gen)
    gen.add_argument("--seed", type=int, default=DEFAULT_COHORT_SEED)
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=_cmd_cohort_gen)
    export = cohort_sub.add_parser("export", help="dump a cohort to CSV")
    export.add_argument("--cohort", required=True)
    export.add_argument("--csv", required=True)
    export.set_defaults(func=_cmd_cohort_export)

    rec = sub.add_parser("recruit", help="score clients and write a recruitment report")
    rec.add_argument("--cohort", required=True)
    rec.add_argument("--out", required=True)
    rec.add_argument("--preset", choices=["QG", "DG", "balanced"])
    rec.add_argument("--gamma-dv", type=float, default=0.5)
    rec.add_argument("--gamma-sa", type=float, default=0.5)
    rec.add_argument("--gamma-th", type=float, default=0.1)
    rec.set_defaults(func=_cmd_recruit)

    train = sub.add_parser("train", help="train one model outside the experiment harness")
    train_sub = train.add_subparsers(dest="subcommand", required=True)
    central = train_sub.add_parser("central", help="pooled-data baseline")
    central.add_argument("--cohort", required=True)
    central.add_argument("--out", required=True)
    central.add_argument("--epochs", type=int, default=15)
    central.add_argument("--seed", type=int, default=1)
    central.set_defaults(func=_cmd_train_central)
    federated = train_sub.add_parser("federated", help="federated averaging")
    federated.add_argument("--cohort", required=True)
    federated.add_argument("--out", required=True)
    federated.add_argument("--rounds", type=int, default=15)
    federated.add_argument("--local-epochs", type=int, default=4)
    federated.add_argument("--fraction", type=float, default=1.0)
    federated.add_argument("--aggregation", choices=["uniform_mean", "sample_weighted"],
                           default="uniform_mean")
    federated.add_argument("--seed", type=int, default=1)
    federated.add_argument("--selection-seed", type=int, default=1)
    federated.add_argument("--recruit-report",
                           help="JSON recruitment report restricting the federation")
    federated.set_defaults(func=_cmd_train_federated)

    experiment = sub.add_parser("experiment", help="preset experiment runs and sweeps")
    experiment_sub = experiment.add_subparsers(dest="subcommand", required=True)
    for name, handler in (("run", _cmd_experiment_run), ("sweep", _cmd_experiment_sweep)):
        p = experiment_sub.add_parser(name)
        p.add_argument("--config", help="experiment config JSON file")
        p.add_argument("--preset", help="preset name instead of a config file")
        p.add_argument("--output-dir")
        p.add_argument("--seeds", help="comma-separated seed list")
        p.add_argument("--cohort", help="use a saved cohort file")
        p.add_argument("--cohort-seed", type=int)
        p.add_argument("--rounds", type=int)
        p.add_argument("--local-epochs", type=int)
        p.add_argument("--fraction", type=float)
        p.add_argument("--gamma-th", type=float)
        p.add_argument("--epochs", type=int, help="central training epochs")
        p.add_argument("--grid", help='sweep grid, "start:stop:step" or comma list')
        p.set_defaults(func=handler)
    check = experiment_sub.add_parser("selfcheck", help="verify run-directory artifacts")
    check.add_argument("run_dir")
    check.set_defaults(func=_cmd_experiment_selfcheck)

    report = sub.add_parser("report", help="print the summary and emit plot data")
    report.add_argument("run_dir")
    report.set_defaults(func=_cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
