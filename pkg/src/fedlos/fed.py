"""Single-process federated-averaging orchestration and the central baseline.

One round of training is: select a subset of federation members, hand each a
copy of the current global parameters, let each train locally for a fixed
number of epochs, then average the returned parameter vectors into the next
global model. The central baseline trains one model on the pooled data of
all clients.

Reproducibility contract: all randomness derives from the run seed through
fixed stream tags, so a rerun with the same seeds (and one BLAS thread) is
bitwise identical regardless of wall-clock. Stream derivation:

* parameter init:      [seed, 101]
* local training of client c in round r: [seed, 202, r, c]
* central training:    [seed, 202, 0, 0]
* round-r selection:   [selection_seed, r]

Central training therefore coincides bitwise with a one-round federation of
the single client id 0, which is the degenerate case the two code paths are
cross-checked against.

Reported durations cover local training and aggregation only; validation
passes are timed separately and excluded from the training-time totals.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .cohort import Cohort, SampleSet
from . import nnet
from .nnet import ModelParams, TrainHyper

_INIT_STREAM = 101
_TRAIN_STREAM = 202

AGGREGATION_MODES = ("uniform_mean", "sample_weighted")


@dataclass(frozen=True)
class FederationConfig:
    """Round structure and aggregation policy of one federated run."""

    rounds: int = 15
    local_epochs: int = 4
    participation_fraction: float = 1.0
    aggregation: str = "uniform_mean"
    selection_seed: int = 0

    def __post_init__(self) -> None:
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if not (0.0 < self.participation_fraction <= 1.0):
            raise ValueError("participation_fraction must be in (0, 1]")
        if self.aggregation not in AGGREGATION_MODES:
            raise ValueError(f"aggregation must be one of {AGGREGATION_MODES}")


@dataclass
class RoundLog:
    """What happened in one communication round."""

    round_index: int
    selected: tuple[int, ...]
    client_train_loss: dict[int, float]
    client_val_loss: dict[int, float]
    global_val_loss: float
    duration_seconds: float
    cumulative_seconds: float

    def to_json_dict(self) -> dict:
        return {
            "round": self.round_index,
            "selected": list(self.selected),
            "client_train_loss": {str(k): v for k, v in self.client_train_loss.items()},
            "client_val_loss": {str(k): v for k, v in self.client_val_loss.items()},
            "global_val_loss": self.global_val_loss,
            "duration_seconds": self.duration_seconds,
            "cumulative_seconds": self.cumulative_seconds,
        }


@dataclass
class EpochLog:
    """One epoch of the central baseline."""

    epoch: int
    train_loss: float
    val_loss: float
    duration_seconds: float
    cumulative_seconds: float

    def to_json_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "duration_seconds": self.duration_seconds,
            "cumulative_seconds": self.cumulative_seconds,
        }


def aggregate(
    param_sets: list[ModelParams],
    weights: list[float] | None = None,
    client_ids: list[int] | None = None,
) -> ModelParams:
    """Elementwise (weighted) mean of parameter sets.

    When `client_ids` is given, contributions are summed in ascending-id
    order regardless of input order, so the result is exactly permutation
    invariant. The uniform mean is computed as the equal-weight case of the
    weighted path, so both modes agree bitwise when all weights are equal.
    """
    if not param_sets:
        raise ValueError("at least one parameter set required")
    if weights is not None and len(weights) != len(param_sets):
        raise ValueError("weights length does not match parameter sets")
    if client_ids is not None:
        if len(client_ids) != len(param_sets):
            raise ValueError("client_ids length does not match parameter sets")
        order = np.argsort(np.asarray(client_ids, dtype=np.int64), kind="stable")
        param_sets = [param_sets[i] for i in order]
        if weights is not None:
            weights = [weights[i] for i in order]

    template = param_sets[0]
    flats = []
    for p in param_sets:
        flat = p.flatten()
        if flat.shape[0] != template.param_count:
            raise ValueError("parameter sets have mismatched shapes")
        flats.append(flat)
    stacked = np.stack(flats)

    if weights is None:
        w = np.ones(len(param_sets))
    else:
        w = np.asarray(weights, dtype=np.float64)
        if np.any(w < 0) or w.sum() <= 0:
            raise ValueError("weights must be non-negative with positive sum")
    normalized = w / w.sum()
    return template.unflatten(normalized @ stacked)


def select_clients(
    client_ids: list[int], fraction: float, round_index: int, selection_seed: int
) -> list[int]:
    """Uniform without-replacement sample of max(1, round(fraction * count)) ids.

    Rounding is half-up (so 10% of 189 is 19 and 10% of 54 is 5). The RNG
    stream depends on (selection_seed, round_index) only, making every round
    independently reproducible. fraction 1.0 returns all ids in id order.
    """
    ids = sorted(client_ids)
    if not ids:
        raise ValueError("client_ids must be non-empty")
    if not (0.0 < fraction <= 1.0):
        raise ValueError("fraction must be in (0, 1]")
    size = max(1, int(math.floor(fraction * len(ids) + 0.5)))
    if size >= len(ids):
        return ids
    rng = np.random.default_rng([selection_seed, round_index])
    picks = rng.choice(len(ids), size=size, replace=False)
    return sorted(ids[i] for i in picks)


def _fused(block: SampleSet) -> tuple[np.ndarray, np.ndarray]:
    return nnet.fuse_sequences(block.temporal, block.static), block.target


def _val_msle(params: ModelParams, val_inputs: np.ndarray, val_targets: np.ndarray) -> float:
    if val_targets.shape[0] == 0:
        return float("nan")
    return nnet.msle_loss(nnet.predict(params, val_inputs), val_targets)


def run_federated(
    cohort: Cohort,
    member_ids: list[int],
    fed_cfg: FederationConfig,
    hyper: TrainHyper,
    seed: int,
) -> tuple[ModelParams, list[RoundLog]]:
    """Train a federation of the given members; returns final params and logs.

    Each selected client trains a copy of the current global parameters for
    `local_epochs` epochs with a client-and-round-derived RNG stream, after
    which the copies are averaged (uniformly or by local sample size). Logged
    validation losses are computed after local training and after
    aggregation; they do not count toward the training-time totals.
    """
    if not member_ids:
        raise ValueError("member_ids must be non-empty")
    members = sorted(member_ids)
    datasets = {cid: cohort.client(cid) for cid in members}
    for cid, ds in datasets.items():
        if len(ds.train) == 0:
            raise ValueError(f"federation member {cid} has an empty train split")

    train_data = {cid: _fused(ds.train) for cid, ds in datasets.items()}
    val_blocks = [datasets[cid].validation for cid in members if len(datasets[cid].validation)]
    if val_blocks:
        pooled_val = SampleSet.concat(val_blocks)
        val_inputs, val_targets = _fused(pooled_val)
    else:
        val_inputs, val_targets = np.empty((0, 24, 1)), np.empty((0,))

    params = nnet.init_params(hyper, cohort.feature_dims, seed=[seed, _INIT_STREAM])
    logs: list[RoundLog] = []
    cumulative = 0.0
    for round_index in range(fed_cfg.rounds):
        selected = select_clients(
            members, fed_cfg.participation_fraction, round_index, fed_cfg.selection_seed
        )
        local_params: list[ModelParams] = []
        train_losses: dict[int, float] = {}
        duration = 0.0
        for cid in selected:
            t0 = time.perf_counter()
            local, losses = nnet.train_epochs(
                params,
                train_data[cid],
                hyper,
                fed_cfg.local_epochs,
                seed=[seed, _TRAIN_STREAM, round_index, cid],
            )
            duration += time.perf_counter() - t0
            local_params.append(local)
            train_losses[cid] = losses[-1]

        weights = None
        if fed_cfg.aggregation == "sample_weighted":
            weights = [float(len(datasets[cid].train)) for cid in selected]
        t0 = time.perf_counter()
        params = aggregate(local_params, weights=weights, client_ids=selected)
        duration += time.perf_counter() - t0
        cumulative += duration

        val_losses = {
            cid: _val_msle(local, *_fused(datasets[cid].validation))
            for cid, local in zip(selected, local_params)
        }
        global_val = _val_msle(params, val_inputs, val_targets)
        logs.append(
            RoundLog(
                round_index=round_index,
                selected=tuple(selected),
                client_train_loss=train_losses,
                client_val_loss=val_losses,
                global_val_loss=global_val,
                duration_seconds=duration,
                cumulative_seconds=cumulative,
            )
        )
    return params, logs


def run_central(
    cohort: Cohort,
    hyper: TrainHyper,
    epochs: int = 15,
    seed: int = 0,
) -> tuple[ModelParams, list[EpochLog]]:
    """Train one model on the pooled train data of every client."""
    pooled = cohort.pooled_train()
    if len(pooled) == 0:
        raise ValueError("pooled train split is empty")
    inputs, targets = _fused(pooled)
    val_inputs, val_targets = _fused(cohort.pooled_validation())

    params = nnet.init_params(hyper, cohort.feature_dims, seed=[seed, _INIT_STREAM])

    val_losses: list[float] = []
    durations: list[float] = []
    last_mark = time.perf_counter()

    def on_epoch_end(_epoch: int, current: ModelParams) -> None:
        nonlocal last_mark
        now = time.perf_counter()
        durations.append(now - last_mark)
        val_losses.append(_val_msle(current, val_inputs, val_targets))
        last_mark = time.perf_counter()

    params, train_losses = nnet.train_epochs(
        params,
        (inputs, targets),
        hyper,
        epochs,
        seed=[seed, _TRAIN_STREAM, 0, 0],
        on_epoch_end=on_epoch_end,
    )

    logs: list[EpochLog] = []
    cumulative = 0.0
    for epoch, (train_loss, val_loss, duration) in enumerate(
        zip(train_losses, val_losses, durations)
    ):
        cumulative += duration
        logs.append(
            EpochLog(
                epoch=epoch,
                train_loss=train_loss,
                val_loss=val_loss,
                duration_seconds=duration,
                cumulative_seconds=cumulative,
            )
        )
    return params, logs
