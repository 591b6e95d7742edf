"""Client recruitment from disclosed target histograms and sample sizes.

Before a federation is formed, every candidate client discloses a tuple
(target histogram, local sample size). Each client is scored by how well
its local target distribution represents the pooled population and by how
large its local sample is; the federation is then built from the clients
whose cumulative score stays under a configurable fraction of the total.

Lower scores mean more representative clients. A client's score is

    score = gamma_dv * divergence + gamma_sa * n ** -0.5

where divergence is the L1 distance between the client's normalized
histogram and the pooled normalized histogram. Recruitment walks the
ascending score order and keeps every client up to and including the one
at which the running sum first reaches ``gamma_th`` times the total score.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_BIN_EDGES = (0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 14.0)


@dataclass(frozen=True)
class BinEdges:
    """Left edges of half-open histogram bins; the last bin is unbounded above.

    The default edges bin a length-of-stay target (fractional days) into the
    ten bins [0,1), [1,2), ..., [7,8), [8,14), [14,+inf).
    """

    edges: tuple[float, ...] = DEFAULT_BIN_EDGES

    def __post_init__(self) -> None:
        if len(self.edges) < 1:
            raise ValueError("at least one bin edge required")
        if self.edges[0] < 0:
            raise ValueError("first bin edge must be >= 0")
        if any(b <= a for a, b in zip(self.edges, self.edges[1:])):
            raise ValueError("bin edges must be strictly increasing")

    @property
    def n_bins(self) -> int:
        return len(self.edges)

    def assign(self, values: np.ndarray) -> np.ndarray:
        """Map values to bin indices. Bins are half-open [a, b); last bin open-ended."""
        inner = np.asarray(self.edges[1:], dtype=np.float64)
        return np.searchsorted(inner, np.asarray(values, dtype=np.float64), side="right")


@dataclass(frozen=True)
class Histogram:
    """Per-bin counts of target values for one dataset."""

    counts: np.ndarray

    def __post_init__(self) -> None:
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 1:
            raise ValueError("histogram counts must be a 1-d vector")
        if np.any(counts < 0):
            raise ValueError("histogram counts must be non-negative")
        object.__setattr__(self, "counts", counts)

    @property
    def n_bins(self) -> int:
        return int(self.counts.shape[0])

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def normalized(self) -> np.ndarray:
        total = self.total
        if total == 0:
            raise ValueError("cannot normalize an empty histogram")
        return self.counts.astype(np.float64) / float(total)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Histogram):
            return NotImplemented
        return np.array_equal(self.counts, other.counts)


@dataclass(frozen=True)
class ClientReport:
    """The (histogram, sample size) tuple a candidate client discloses."""

    client_id: int
    histogram: Histogram
    n: int

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError(f"client {self.client_id}: sample size must be >= 1")
        if self.n != self.histogram.total:
            raise ValueError(
                f"client {self.client_id}: n={self.n} does not match "
                f"histogram total {self.histogram.total}"
            )


@dataclass(frozen=True)
class RecruitmentConfig:
    """Weights for divergence vs. sample size, plus the recruitment cutoff fraction."""

    gamma_dv: float
    gamma_sa: float
    gamma_th: float = 0.1

    def __post_init__(self) -> None:
        if self.gamma_dv < 0 or self.gamma_sa < 0:
            raise ValueError("gamma_dv and gamma_sa must be >= 0")
        if self.gamma_dv + self.gamma_sa <= 0:
            raise ValueError("gamma_dv + gamma_sa must be > 0")
        if not (0.0 < self.gamma_th <= 1.0):
            raise ValueError("gamma_th must be in (0, 1]")


@dataclass(frozen=True)
class RecruitmentResult:
    """Scored clients and the recruited subset under the threshold.

    ``recruited`` is a prefix of the ascending-score ordering (ties broken by
    ascending client id); ``threshold`` equals gamma_th times the total score.
    """

    scores: dict[int, float]
    total_score: float
    threshold: float
    recruited: tuple[int, ...]
    rejected: tuple[int, ...]

    def to_json_dict(self) -> dict:
        """Wire format for the recruitment report."""
        return {
            "scores": {str(cid): score for cid, score in self.scores.items()},
            "nu_g": self.total_score,
            "threshold": self.threshold,
            "recruited": list(self.recruited),
            "rejected": list(self.rejected),
        }


def global_aggregate(reports: list[ClientReport]) -> tuple[Histogram, int]:
    """Pool the disclosed tuples: elementwise histogram sum and total sample size."""
    if not reports:
        raise ValueError("at least one client report required")
    n_bins = reports[0].histogram.n_bins
    for report in reports:
        if report.histogram.n_bins != n_bins:
            raise ValueError(
                f"client {report.client_id}: histogram has {report.histogram.n_bins} "
                f"bins, expected {n_bins}"
            )
    counts = np.sum([r.histogram.counts for r in reports], axis=0)
    n_global = int(sum(r.n for r in reports))
    return Histogram(counts), n_global


def divergence(report: ClientReport, global_hist: Histogram, n_global: int) -> float:
    """L1 distance between the client's and the pooled normalized histograms.

    Always in [0, 2]; 0 means the client's histogram is exactly proportional
    to the pooled one.
    """
    if report.histogram.n_bins != global_hist.n_bins:
        raise ValueError("histogram length mismatch")
    if n_global < report.n:
        raise ValueError("global sample size cannot be smaller than the client's")
    local = report.histogram.counts.astype(np.float64) / float(report.n)
    pooled = global_hist.counts.astype(np.float64) / float(n_global)
    return float(np.sum(np.abs(pooled - local)))


def representativeness(
    report: ClientReport,
    global_hist: Histogram,
    n_global: int,
    cfg: RecruitmentConfig,
) -> float:
    """Score one client; lower means more representative.

    Combines the histogram divergence with an inverse-root sample-size term so
    that, at equal divergence, clients with more data score lower (better).
    """
    dv = divergence(report, global_hist, n_global)
    return cfg.gamma_dv * dv + cfg.gamma_sa * float(report.n) ** -0.5


def recruit(reports: list[ClientReport], cfg: RecruitmentConfig) -> RecruitmentResult:
    """Select the recruited subset under the cumulative-score threshold.

    Clients are sorted by ascending score (ties by ascending client id) and
    accumulated until the running sum first reaches gamma_th times the total
    score; the crossing client is included. At least one client is always
    recruited, and gamma_th = 1 recruits everyone.
    """
    if not reports:
        raise ValueError("at least one client report required")
    ids = [r.client_id for r in reports]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate client ids in reports")

    global_hist, n_global = global_aggregate(reports)
    scores = {
        r.client_id: representativeness(r, global_hist, n_global, cfg) for r in reports
    }

    order = sorted(scores, key=lambda cid: (scores[cid], cid))
    ordered_scores = np.array([scores[cid] for cid in order], dtype=np.float64)
    cumulative = np.cumsum(ordered_scores)
    total = float(cumulative[-1])
    threshold = cfg.gamma_th * total

    crossing = int(np.searchsorted(cumulative, threshold, side="left"))
    crossing = min(crossing, len(order) - 1)
    recruited = tuple(order[: crossing + 1])
    rejected = tuple(order[crossing + 1 :])
    return RecruitmentResult(
        scores=scores,
        total_score=total,
        threshold=threshold,
        recruited=recruited,
        rejected=rejected,
    )


PRESETS = {
    "QG": (1.0, 0.01),
    "DG": (0.01, 1.0),
    "balanced": (0.5, 0.5),
}


def preset(name: str, gamma_th: float = 0.1) -> RecruitmentConfig:
    """Named weight settings: quality-greedy, data-greedy, or balanced."""
    try:
        gamma_dv, gamma_sa = PRESETS[name]
    except KeyError:
        raise ValueError(
            f"unknown recruitment preset {name!r}; expected one of {sorted(PRESETS)}"
        ) from None
    return RecruitmentConfig(gamma_dv=gamma_dv, gamma_sa=gamma_sa, gamma_th=gamma_th)
