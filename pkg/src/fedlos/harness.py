"""Experiment presets, runs, threshold sweeps, and artifact emission.

An experiment is described by one JSON config (or a named preset plus
overrides) and produces a self-contained run directory:

    run_dir/
      manifest.json                 config echo, config hash, versions, seeds
      train_target_histogram.csv    pooled train-target distribution
      recruitment.json              recruitment report (recruited presets)
      metrics.csv                   per-seed metrics; bitwise reproducible
      timing.csv                    per-seed training wall-clock
      summary.csv                   mean +/- sd per preset, includes timing
      seed_<s>/rounds.jsonl         per-round (or per-epoch) logs
      seed_<s>/checkpoint.bin(.json) final model

Training wall-clock lives only in timing.csv, summary.csv and the round
logs; metrics.csv carries the model-quality numbers and is bit-identical
across reruns of the same config and seeds (single-threaded).

Presets mirror the standard experiment grid: Central; Federated-AC/SC
(all clients, full vs. 10% participation); Federated-ARC/SRC (recruited
clients, full vs. 10% participation, balanced recruitment weights);
Federated-SRC-QG/DG (quality- and data-greedy recruitment extremes); and
sweep-gamma-th (recruitment-threshold sweep with full participation of the
recruited members, so training time scales with the recruited data).
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import platform
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from . import charts
from .cohort import Cohort, CohortSpec, client_reports, generate_cohort, load_cohort
from .fed import FederationConfig, run_central, run_federated
from .metrics import (
    MetricsReport,
    evaluate,
    write_metrics_csv,
    write_summary_csv,
    write_timing_csv,
)
from .nnet import TrainHyper, save_checkpoint
from .recruit import RecruitmentConfig, RecruitmentResult, preset as recruit_preset
from .recruit import recruit as run_recruitment

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "FEDLOS_OUTPUT_ROOT"
CONFIG_SCHEMA_VERSION = 1
DEFAULT_SEEDS = (1, 2, 3, 4, 5)
DEFAULT_COHORT_SEED = 1234
DEFAULT_GAMMA_GRID = tuple(round(0.05 * k, 2) for k in range(1, 21))

HISTOGRAM_CUTOFF_DAYS = 25


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 2)."""


# preset name -> (mode, participation fraction, recruitment preset or None)
PRESET_TABLE: dict[str, tuple[str, float, str | None]] = {
    "Central": ("central", 1.0, None),
    "Federated-AC": ("federated", 1.0, None),
    "Federated-SC": ("federated", 0.1, None),
    "Federated-ARC": ("federated", 1.0, "balanced"),
    "Federated-SRC": ("federated", 0.1, "balanced"),
    "Federated-SRC-QG": ("federated", 0.1, "QG"),
    "Federated-SRC-DG": ("federated", 0.1, "DG"),
    "sweep-gamma-th": ("sweep", 1.0, "balanced"),
}
RECRUITED_PRESETS = {name for name, (_, _, r) in PRESET_TABLE.items() if r is not None}


@dataclass(frozen=True)
class ExperimentConfig:
    """One run's complete, seedable description."""

    preset: str
    output_dir: str
    cohort_spec: CohortSpec | None = None
    cohort_path: str | None = None
    cohort_seed: int = DEFAULT_COHORT_SEED
    recruitment: RecruitmentConfig | None = None
    federation: FederationConfig = field(default_factory=FederationConfig)
    hyper: TrainHyper = field(default_factory=TrainHyper)
    central_epochs: int = 15
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    gamma_grid: tuple[float, ...] | None = None

    def validate(self) -> None:
        if self.preset not in PRESET_TABLE:
            raise ConfigError(
                f"unknown preset {self.preset!r}; expected one of {sorted(PRESET_TABLE)}"
            )
        if self.cohort_spec is None and self.cohort_path is None:
            raise ConfigError("config needs either a cohort spec or a cohort file path")
        if self.preset in RECRUITED_PRESETS and self.recruitment is None:
            raise ConfigError(f"preset {self.preset} requires a recruitment config")
        if self.preset == "sweep-gamma-th":
            grid = self.gamma_grid or DEFAULT_GAMMA_GRID
            if not grid:
                raise ConfigError("sweep requires a non-empty gamma_th grid")
            if any(not (0.0 < g <= 1.0) for g in grid):
                raise ConfigError("gamma_th grid values must be in (0, 1]")
        if not self.seeds:
            raise ConfigError("at least one seed required")
        if any(s < 0 for s in self.seeds):
            raise ConfigError("seeds must be non-negative")
        if self.central_epochs < 0:
            raise ConfigError("central_epochs must be >= 0")

    @classmethod
    def from_preset(cls, name: str, output_dir: str, **overrides) -> "ExperimentConfig":
        """Build a config with the preset's pinned participation and recruitment."""
        if name not in PRESET_TABLE:
            raise ConfigError(
                f"unknown preset {name!r}; expected one of {sorted(PRESET_TABLE)}"
            )
        _, fraction, recruit_name = PRESET_TABLE[name]
        fields: dict = {
            "preset": name,
            "output_dir": output_dir,
            "cohort_spec": CohortSpec(),
            "federation": FederationConfig(participation_fraction=fraction),
            "recruitment": recruit_preset(recruit_name) if recruit_name else None,
        }
        fields.update(overrides)
        return cls(**fields)

    def to_json_dict(self) -> dict:
        payload: dict = {
            "schema_version": CONFIG_SCHEMA_VERSION,
            "preset": self.preset,
            "output_dir": self.output_dir,
            "cohort_seed": self.cohort_seed,
            "federation": asdict(self.federation),
            "hyper": asdict(self.hyper),
            "central_epochs": self.central_epochs,
            "seeds": list(self.seeds),
        }
        if self.cohort_spec is not None:
            spec = asdict(self.cohort_spec)
            spec["split_fractions"] = list(self.cohort_spec.split_fractions)
            payload["cohort"] = spec
        if self.cohort_path is not None:
            payload["cohort_path"] = self.cohort_path
        if self.recruitment is not None:
            payload["recruitment"] = asdict(self.recruitment)
        if self.gamma_grid is not None:
            payload["gamma_grid"] = list(self.gamma_grid)
        return payload

    @classmethod
    def from_json_dict(cls, payload: dict) -> "ExperimentConfig":
        version = payload.get("schema_version", CONFIG_SCHEMA_VERSION)
        if version != CONFIG_SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema version {version}")
        known = {
            "schema_version", "preset", "output_dir", "cohort", "cohort_path",
            "cohort_seed", "recruitment", "federation", "hyper",
            "central_epochs", "seeds", "gamma_grid",
        }
        unknown = set(payload) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            cohort_spec = None
            if "cohort" in payload:
                spec = dict(payload["cohort"])
                if "split_fractions" in spec:
                    spec["split_fractions"] = tuple(spec["split_fractions"])
                cohort_spec = CohortSpec(**spec)
            recruitment = (
                RecruitmentConfig(**payload["recruitment"])
                if "recruitment" in payload
                else None
            )
            federation = (
                FederationConfig(**payload["federation"])
                if "federation" in payload
                else FederationConfig()
            )
            hyper = TrainHyper(**payload["hyper"]) if "hyper" in payload else TrainHyper()
            return cls(
                preset=payload["preset"],
                output_dir=payload["output_dir"],
                cohort_spec=cohort_spec,
                cohort_path=payload.get("cohort_path"),
                cohort_seed=int(payload.get("cohort_seed", DEFAULT_COHORT_SEED)),
                recruitment=recruitment,
                federation=federation,
                hyper=hyper,
                central_epochs=int(payload.get("central_epochs", 15)),
                seeds=tuple(payload.get("seeds", DEFAULT_SEEDS)),
                gamma_grid=tuple(payload["gamma_grid"]) if "gamma_grid" in payload else None,
            )
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"invalid experiment config: {exc}") from exc

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_json_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def load_config(path) -> ExperimentConfig:
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return ExperimentConfig.from_json_dict(payload)


def resolve_run_dir(output_dir: str) -> Path:
    """Relative output dirs land under $FEDLOS_OUTPUT_ROOT (default: cwd)."""
    path = Path(output_dir)
    if not path.is_absolute():
        root = os.environ.get(OUTPUT_ROOT_ENV, ".")
        path = Path(root) / path
    return path


def _obtain_cohort(cfg: ExperimentConfig) -> Cohort:
    if cfg.cohort_path is not None:
        return load_cohort(cfg.cohort_path)
    assert cfg.cohort_spec is not None
    return generate_cohort(cfg.cohort_spec, cfg.cohort_seed)


def write_train_histogram_csv(cohort: Cohort, path) -> None:
    """Pooled train-target counts in 1-day bins up to the cutoff.

    The final row is an overflow bin for targets past the cutoff so the
    counts always sum to the pooled train size.
    """
    targets = cohort.pooled_train().target
    edges = np.arange(0, HISTOGRAM_CUTOFF_DAYS + 1, dtype=np.float64)
    indices = np.minimum(
        np.searchsorted(edges[1:], targets, side="right"), HISTOGRAM_CUTOFF_DAYS
    )
    counts = np.bincount(indices, minlength=HISTOGRAM_CUTOFF_DAYS + 1)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_start_days", "bin_end_days", "count"])
        for day in range(HISTOGRAM_CUTOFF_DAYS):
            writer.writerow([day, day + 1, int(counts[day])])
        writer.writerow([HISTOGRAM_CUTOFF_DAYS, "inf", int(counts[HISTOGRAM_CUTOFF_DAYS])])


def _recruit_members(
    cohort: Cohort, recruitment: RecruitmentConfig
) -> tuple[list[int], RecruitmentResult]:
    result = run_recruitment(client_reports(cohort), recruitment)
    return sorted(result.recruited), result


def _write_manifest(run_dir: Path, cfg: ExperimentConfig, extra: dict) -> None:
    manifest = {
        "schema_version": 1,
        "preset": cfg.preset,
        "config": cfg.to_json_dict(),
        "config_sha256": cfg.config_hash(),
        "seeds": list(cfg.seeds),
        "versions": {
            "fedlos": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
    }
    manifest.update(extra)
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _run_one_seed(
    cfg: ExperimentConfig,
    cohort: Cohort,
    members: list[int],
    seed: int,
    run_dir: Path,
) -> tuple[MetricsReport, float]:
    """Returns the metrics report plus the run's whole wall-clock (incl. eval)."""
    mode = PRESET_TABLE[cfg.preset][0]
    seed_dir = run_dir / f"seed_{seed}"
    seed_dir.mkdir(parents=True, exist_ok=True)

    started = time.perf_counter()
    if mode == "central":
        params, logs = run_central(cohort, cfg.hyper, cfg.central_epochs, seed=seed)
    else:
        fed_cfg = replace(cfg.federation, selection_seed=seed)
        params, logs = run_federated(cohort, members, fed_cfg, cfg.hyper, seed=seed)
    wall = time.perf_counter() - started
    tau = logs[-1].cumulative_seconds if logs else 0.0

    with open(seed_dir / "rounds.jsonl", "w", encoding="utf-8") as fh:
        for log in logs:
            fh.write(json.dumps(log.to_json_dict()) + "\n")
    save_checkpoint(
        params, seed_dir / "checkpoint.bin", hyper=cfg.hyper,
        meta={"preset": cfg.preset, "seed": seed},
    )
    report = evaluate(params, cohort.global_test, preset=cfg.preset, seed=seed, tau_seconds=tau)
    return report, wall


def run_experiment(cfg: ExperimentConfig) -> Path:
    """Execute every seed of the configured experiment; returns the run dir."""
    cfg.validate()
    if cfg.preset == "sweep-gamma-th":
        _, run_dir = sweep_gamma_th(cfg)
        return run_dir

    run_dir = resolve_run_dir(cfg.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    cohort = _obtain_cohort(cfg)
    write_train_histogram_csv(cohort, run_dir / "train_target_histogram.csv")

    members = cohort.client_ids
    extra: dict = {"mode": PRESET_TABLE[cfg.preset][0]}
    if cfg.preset in RECRUITED_PRESETS:
        assert cfg.recruitment is not None
        members, result = _recruit_members(cohort, cfg.recruitment)
        (run_dir / "recruitment.json").write_text(
            json.dumps(result.to_json_dict(), indent=2, sort_keys=True)
        )
        extra["recruited_count"] = len(members)

    mode = PRESET_TABLE[cfg.preset][0]
    if mode == "federated":
        per_round = cfg.federation.participation_fraction * len(members)
        if round(per_round) < 1:
            logger.warning(
                "participation fraction %.3f of %d members floors to 1 client per round",
                cfg.federation.participation_fraction, len(members),
            )

    reports = []
    wall_seconds = {}
    for seed in cfg.seeds:
        seed_report, wall = _run_one_seed(cfg, cohort, members, seed, run_dir)
        reports.append(seed_report)
        wall_seconds[(seed_report.preset, seed_report.seed)] = wall
    write_metrics_csv(reports, run_dir / "metrics.csv")
    write_timing_csv(reports, run_dir / "timing.csv", wall_seconds=wall_seconds)
    write_summary_csv(reports, run_dir / "summary.csv")
    _write_manifest(run_dir, cfg, extra)
    return run_dir


@dataclass(frozen=True)
class SweepRow:
    gamma_th: float
    n_rc: int
    msle: float
    mae: float
    tau: float
    seed: int


def sweep_gamma_th(
    cfg: ExperimentConfig, grid: tuple[float, ...] | None = None
) -> tuple[list[SweepRow], Path]:
    """Re-recruit and retrain for each gamma_th on the grid; emit a tidy CSV.

    Rows carry (gamma_th, recruited count, test MSLE, test MAE, training
    wall-clock, seed). The recruited count is non-decreasing along the grid
    because recruited sets are nested prefixes.
    """
    cfg.validate()
    if cfg.recruitment is None:
        raise ConfigError("sweep requires a recruitment config")
    if grid is None:
        grid = cfg.gamma_grid if cfg.gamma_grid is not None else DEFAULT_GAMMA_GRID
    if not grid:
        raise ConfigError("sweep grid must be non-empty")
    if any(not (0.0 < g <= 1.0) for g in grid):
        raise ConfigError("gamma_th grid values must be in (0, 1]")

    run_dir = resolve_run_dir(cfg.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    cohort = _obtain_cohort(cfg)
    write_train_histogram_csv(cohort, run_dir / "train_target_histogram.csv")
    reports = client_reports(cohort)

    rows: list[SweepRow] = []
    for gamma_th in grid:
        recruitment = replace(cfg.recruitment, gamma_th=gamma_th)
        result = run_recruitment(reports, recruitment)
        members = sorted(result.recruited)
        for seed in cfg.seeds:
            fed_cfg = replace(cfg.federation, selection_seed=seed)
            params, logs = run_federated(cohort, members, fed_cfg, cfg.hyper, seed=seed)
            tau = logs[-1].cumulative_seconds if logs else 0.0
            report = evaluate(params, cohort.global_test, preset=cfg.preset, seed=seed)
            rows.append(
                SweepRow(
                    gamma_th=gamma_th, n_rc=len(members),
                    msle=report.msle, mae=report.mae, tau=tau, seed=seed,
                )
            )

    with open(run_dir / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["gamma_th", "n_rc", "msle", "mae", "tau", "seed"])
        for row in rows:
            writer.writerow(
                [repr(row.gamma_th), row.n_rc, repr(row.msle), repr(row.mae),
                 repr(row.tau), row.seed]
            )
    _write_manifest(run_dir, cfg, {"mode": "sweep", "grid": list(grid)})
    return rows, run_dir


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def emit_plot_data(run_dir) -> list[Path]:
    """Write plot-ready CSV/SVG files for a completed run.

    Emits the train-target histogram chart and runtime-versus-metric series
    (from the sweep table when present, otherwise from per-seed metrics and
    timing). Raises FileNotFoundError when the run artifacts are missing.
    """
    run_dir = Path(run_dir)
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"{run_dir} is not a completed run (no manifest.json)")

    outputs: list[Path] = []
    hist_path = run_dir / "train_target_histogram.csv"
    if not hist_path.exists():
        raise FileNotFoundError(f"missing artifact {hist_path}")
    hist_rows = _read_csv(hist_path)
    svg = run_dir / "train_target_histogram.svg"
    charts.bar_chart(
        labels=[r["bin_start_days"] for r in hist_rows],
        counts=[float(r["count"]) for r in hist_rows],
        path=svg,
        title="Training-target distribution",
        x_label="length of stay (days)",
        y_label="patient count",
    )
    outputs.append(svg)

    sweep_path = run_dir / "sweep.csv"
    if sweep_path.exists():
        rows = _read_csv(sweep_path)
        by_gamma: dict[float, list[dict]] = {}
        for r in rows:
            by_gamma.setdefault(float(r["gamma_th"]), []).append(r)
        series = []
        for gamma_th in sorted(by_gamma):
            group = by_gamma[gamma_th]
            series.append(
                {
                    "gamma_th": gamma_th,
                    "n_rc": int(group[0]["n_rc"]),
                    "tau": float(np.mean([float(r["tau"]) for r in group])),
                    "msle": float(np.mean([float(r["msle"]) for r in group])),
                    "mae": float(np.mean([float(r["mae"]) for r in group])),
                }
            )
    else:
        metrics_path = run_dir / "metrics.csv"
        timing_path = run_dir / "timing.csv"
        if not metrics_path.exists() or not timing_path.exists():
            raise FileNotFoundError(f"missing metrics/timing artifacts in {run_dir}")
        metric_rows = _read_csv(metrics_path)
        timing = {
            (r["preset"], r["seed"]): float(r["tau_seconds"])
            for r in _read_csv(timing_path)
        }
        series = [
            {
                "gamma_th": float("nan"),
                "n_rc": -1,
                "tau": timing[(r["preset"], r["seed"])],
                "msle": float(r["msle"]),
                "mae": float(r["mae"]),
            }
            for r in metric_rows
        ]

    for metric in ("msle", "mae"):
        csv_path = run_dir / f"plot_runtime_{metric}.csv"
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["gamma_th", "n_rc", "tau", metric])
            for s in series:
                writer.writerow([repr(s["gamma_th"]), s["n_rc"], repr(s["tau"]), repr(s[metric])])
        outputs.append(csv_path)
        svg_path = run_dir / f"plot_runtime_{metric}.svg"
        charts.line_chart(
            points=[(s["tau"], s[metric]) for s in series],
            path=svg_path,
            title=f"Training time vs {metric.upper()}",
            x_label="training time (s)",
            y_label=metric.upper(),
        )
        outputs.append(svg_path)
    return outputs


def selfcheck(run_dir) -> list[str]:
    """Verify a run directory contains every artifact it should; returns problems."""
    run_dir = Path(run_dir)
    problems: list[str] = []
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.exists():
        return [f"missing {manifest_path.name}"]
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        return [f"unreadable manifest.json: {exc}"]

    mode = manifest.get("mode")
    preset_name = manifest.get("preset", "")
    seeds = manifest.get("seeds", [])

    def need(name: str) -> None:
        if not (run_dir / name).exists():
            problems.append(f"missing {name}")

    need("train_target_histogram.csv")
    if mode == "sweep":
        need("sweep.csv")
        return problems

    need("metrics.csv")
    need("timing.csv")
    need("summary.csv")
    if preset_name in RECRUITED_PRESETS:
        need("recruitment.json")
    for seed in seeds:
        for name in (f"seed_{seed}/rounds.jsonl", f"seed_{seed}/checkpoint.bin",
                     f"seed_{seed}/checkpoint.bin.json"):
            need(name)
    metrics_path = run_dir / "metrics.csv"
    if metrics_path.exists():
        rows = _read_csv(metrics_path)
        if len(rows) != len(seeds):
            problems.append(
                f"metrics.csv has {len(rows)} rows but the run declares {len(seeds)} seeds"
            )
    return problems
