"""Test-set evaluation metrics, timing summaries, and cross-seed comparison.

Evaluation reports MAE, MAPE, MSE and MSLE over the pooled hold-out test
split, together with the training wall-clock time of the run that produced
the checkpoint. Metric means are accumulated with exactly rounded summation
(`math.fsum`), so a report is bit-identical under any permutation of the
test set.

Cross-seed comparisons use Welch's unequal-variance two-sided t-test, with
significance flagged at the 5% and 1% levels.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import stdtr

from . import nnet
from .cohort import SampleSet
from .nnet import ModelParams

# Targets are clamped below at half an hour (in days) in the MAPE
# denominator; synthetic targets can get arbitrarily close to zero.
MAPE_MIN_TARGET_DAYS = 1.0 / 48.0

METRIC_NAMES = ("mae", "mape", "mse", "msle")


@dataclass(frozen=True)
class MetricsReport:
    """All test metrics for one (preset, seed) run."""

    mae: float
    mape: float
    mse: float
    msle: float
    n_test: int
    tau_seconds: float
    seed: int
    preset: str


def report_from_predictions(
    y_hat: np.ndarray,
    y: np.ndarray,
    preset: str = "",
    seed: int = 0,
    tau_seconds: float = 0.0,
) -> MetricsReport:
    """Compute the four metrics from prediction/target vectors."""
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y_hat.shape != y.shape or y.ndim != 1:
        raise ValueError("predictions and targets must be equal-length vectors")
    n = y.shape[0]
    if n == 0:
        raise ValueError("test set must be non-empty")

    err = y - y_hat
    denom = np.maximum(y, MAPE_MIN_TARGET_DAYS)
    log_err = np.log1p(y) - np.log1p(y_hat)
    return MetricsReport(
        mae=math.fsum(np.abs(err)) / n,
        mape=math.fsum(np.abs(err) / denom) / n,
        mse=math.fsum(err * err) / n,
        msle=math.fsum(log_err * log_err) / n,
        n_test=n,
        tau_seconds=tau_seconds,
        seed=seed,
        preset=preset,
    )


def evaluate(
    params: ModelParams,
    test_set: SampleSet,
    preset: str = "",
    seed: int = 0,
    tau_seconds: float = 0.0,
) -> MetricsReport:
    """Run eval-mode inference on every test sample and report all metrics."""
    if len(test_set) == 0:
        raise ValueError("test set must be non-empty")
    inputs = nnet.fuse_sequences(test_set.temporal, test_set.static)
    y_hat = nnet.predict(params, inputs)
    return report_from_predictions(
        y_hat, test_set.target, preset=preset, seed=seed, tau_seconds=tau_seconds
    )


@dataclass(frozen=True)
class ComparisonResult:
    """Welch-test outcome for one metric across two groups of runs."""

    metric: str
    p_value: float
    mean_a: float
    sd_a: float
    mean_b: float
    sd_b: float
    significant_5pct: bool
    significant_1pct: bool


def welch_t_test(a: np.ndarray, b: np.ndarray) -> tuple[float, float, float]:
    """Two-sided unequal-variance t-test; returns (t, degrees of freedom, p).

    Degenerate zero-variance inputs collapse to p = 1 for equal means and
    p = 0 otherwise.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("both groups need at least two samples")
    var_a = a.var(ddof=1) / a.size
    var_b = b.var(ddof=1) / b.size
    se_sq = var_a + var_b
    if se_sq == 0.0:
        equal = a.mean() == b.mean()
        return 0.0 if equal else math.inf, float(a.size + b.size - 2), 1.0 if equal else 0.0
    t = (a.mean() - b.mean()) / math.sqrt(se_sq)
    df = se_sq**2 / (var_a**2 / (a.size - 1) + var_b**2 / (b.size - 1))
    p = 2.0 * float(stdtr(df, -abs(t)))
    return float(t), float(df), p


def compare_runs(
    a: list[MetricsReport], b: list[MetricsReport], metric: str
) -> ComparisonResult:
    """Compare one metric between two groups of per-seed reports."""
    if metric not in METRIC_NAMES:
        raise ValueError(f"metric must be one of {METRIC_NAMES}")
    if len(a) < 2 or len(b) < 2:
        raise ValueError("need at least two reports on each side")
    values_a = np.array([getattr(r, metric) for r in a])
    values_b = np.array([getattr(r, metric) for r in b])
    _, _, p = welch_t_test(values_a, values_b)
    return ComparisonResult(
        metric=metric,
        p_value=p,
        mean_a=float(values_a.mean()),
        sd_a=float(values_a.std(ddof=1)),
        mean_b=float(values_b.mean()),
        sd_b=float(values_b.std(ddof=1)),
        significant_5pct=p < 0.05,
        significant_1pct=p < 0.01,
    )


def write_metrics_csv(reports: list[MetricsReport], path) -> None:
    """Per-run metric rows. Contains no timing, so reruns are bit-identical."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["preset", "seed", "n_test", "mae", "mape", "mse", "msle"])
        for r in reports:
            writer.writerow(
                [r.preset, r.seed, r.n_test, repr(r.mae), repr(r.mape), repr(r.mse), repr(r.msle)]
            )


def write_timing_csv(
    reports: list[MetricsReport],
    path,
    wall_seconds: dict[tuple[str, int], float] | None = None,
) -> None:
    """Per-run timing (inherently non-deterministic).

    tau_seconds is pure training time (local epochs plus aggregation);
    `wall_seconds`, when provided, is the whole run including the validation
    passes between rounds.
    """
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["preset", "seed", "tau_seconds", "wall_seconds"])
        for r in reports:
            wall = (wall_seconds or {}).get((r.preset, r.seed), "")
            writer.writerow(
                [r.preset, r.seed, repr(r.tau_seconds), repr(wall) if wall != "" else ""]
            )


def _mean_sd(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    sd = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), sd


def write_summary_csv(reports: list[MetricsReport], path) -> None:
    """Mean and standard deviation per preset for every metric plus timing."""
    presets: dict[str, list[MetricsReport]] = {}
    for r in reports:
        presets.setdefault(r.preset, []).append(r)

    columns = ["preset", "n_seeds"]
    for name in METRIC_NAMES + ("tau_seconds",):
        columns += [f"{name}_mean", f"{name}_sd"]

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for preset_name, group in presets.items():
            row: list = [preset_name, len(group)]
            for name in METRIC_NAMES + ("tau_seconds",):
                mean, sd = _mean_sd([getattr(r, name) for r in group])
                row += [repr(mean), repr(sd)]
            writer.writerow(row)
