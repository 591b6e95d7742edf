"""Synthetic non-IID patient cohorts partitioned across simulated hospitals.

Real ICU records are credentialed, so this module generates cohorts whose
shape statistics (client count, stay count, split sizes, target mean/median)
match a configurable profile. Each simulated hospital ("client") holds a
train and validation split; a pooled test split draws from every client's
generating distribution, including clients a recruitment step may later
exclude.

Generation recipe (fully deterministic for a fixed spec and seed):

* Client sizes are sampled from a log-normal and renormalized to the split
  totals, so hospital sizes are heavy-tailed like real networks.
* Each client gets a label-shift offset ``u_c * shift_strength`` with
  ``u_c ~ uniform(-1, 1)``, applied to the log-mean of its target
  distribution (a multiplicative shift of the target scale). This is exactly
  the kind of output-distribution divergence the recruitment score measures.
* Per patient, a latent log-severity ``a`` is drawn; the target is
  ``target_los = g(temporal summary stats, static) * exp(eps)`` with
  ``eps ~ Normal(0, noise_sd)`` and

      g = exp(0.5 * (mean_t(temporal[:, 0]) * 48/25 + static[0]))

  The first temporal channel is a linear severity ramp ``a * (t+1)/24``
  (time-average 25/48 * a) and the first static feature equals ``a``, so g
  recovers ``exp(a)`` exactly; remaining channels are distractor noise.
  The global log-normal is calibrated so the pooled target mean and median
  approximate the configured values.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .recruit import BinEdges, ClientReport, Histogram

MAGIC = b"FRC1"
FORMAT_VERSION = 1

# Stream tags for deriving independent RNG substreams from the cohort seed.
_STREAM_SIZES = 0
_STREAM_SHIFTS = 1
_STREAM_SAMPLES = 2
_SPLIT_TAGS = {"train": 0, "validation": 1, "test": 2}

# Fixed coefficients of the target function g (see module docstring).
_RAMP_MEAN = 25.0 / 48.0


class CohortFileError(Exception):
    """Base class for cohort persistence failures."""


class CohortFormatError(CohortFileError):
    """File does not start with the expected magic bytes or has a bad header."""


class CohortVersionError(CohortFileError):
    """File was written by an unsupported format version."""


class CohortTruncatedError(CohortFileError):
    """File ends before all declared blocks are present."""


class CohortChecksumError(CohortFileError):
    """File content does not match its embedded checksum."""


class CohortGenerationError(ValueError):
    """Spec and seed combination cannot produce a valid cohort."""


@dataclass(frozen=True)
class CohortSpec:
    """Knobs for the synthetic cohort generator.

    Defaults reproduce the shape of the reference ICU cohort: 189 hospitals,
    89,127 stays split 70/15/15, pooled LoS mean 3.69 and median 2.27 days,
    38 features (20 temporal + 18 static).
    """

    n_clients: int = 189
    total_stays: int = 89127
    split_fractions: tuple[float, float, float] = (0.70, 0.15, 0.15)
    target_mean: float = 3.69
    target_median: float = 2.27
    f_t: int = 20
    f_s: int = 18
    size_dispersion: float = 0.8
    shift_strength: float = 0.6
    noise_sd: float = 0.3

    def __post_init__(self) -> None:
        if self.n_clients < 1:
            raise ValueError("n_clients must be >= 1")
        if self.total_stays < self.n_clients:
            raise ValueError("total_stays must be >= n_clients")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ValueError("split_fractions must sum to 1")
        if any(f < 0 for f in self.split_fractions):
            raise ValueError("split_fractions must be non-negative")
        if self.split_fractions[0] <= 0:
            raise ValueError("train fraction must be positive")
        if self.target_mean < self.target_median or self.target_median <= 0:
            raise ValueError("need target_mean >= target_median > 0")
        if self.f_t < 2 or self.f_s < 1:
            raise ValueError("need f_t >= 2 and f_s >= 1 (signal channels)")
        if self.size_dispersion <= 0:
            raise ValueError("size_dispersion must be > 0")
        if self.shift_strength < 0 or self.noise_sd < 0:
            raise ValueError("shift_strength and noise_sd must be >= 0")

    def log_target_params(self) -> tuple[float, float]:
        """(log-median, latent signal sd) calibrated to the pooled mean/median.

        For a log-normal target, median = exp(mu) and mean/median =
        exp(sigma^2 / 2); the latent signal variance is what remains of
        sigma^2 after the client-shift and noise variances are budgeted out.
        """
        mu = math.log(self.target_median)
        sigma_sq = 2.0 * math.log(self.target_mean / self.target_median)
        signal_var = sigma_sq - self.shift_strength**2 / 3.0 - self.noise_sd**2
        if signal_var <= 0:
            raise CohortGenerationError(
                "shift_strength and noise_sd leave no room for target signal "
                f"variance (total log-variance {sigma_sq:.4f}); reduce them"
            )
        return mu, math.sqrt(signal_var)


@dataclass(frozen=True)
class PatientSample:
    """One ICU stay: 24 hourly feature rows, static features, and the LoS target."""

    temporal: np.ndarray
    static: np.ndarray
    target_los: float

    def __post_init__(self) -> None:
        if self.temporal.ndim != 2 or self.temporal.shape[0] != 24:
            raise ValueError("temporal must have exactly 24 rows")
        if not np.all(np.isfinite(self.temporal)) or not np.all(np.isfinite(self.static)):
            raise ValueError("features must be fully populated")
        if not self.target_los > 0:
            raise ValueError("target_los must be strictly positive")


class SampleSet:
    """A column-stacked sequence of patient samples.

    Stores temporal features as (n, 24, f_t), static features as (n, f_s) and
    targets as (n,), while behaving like a sequence of PatientSample.
    """

    __slots__ = ("temporal", "static", "target")

    def __init__(self, temporal: np.ndarray, static: np.ndarray, target: np.ndarray):
        temporal = np.ascontiguousarray(temporal, dtype=np.float64)
        static = np.ascontiguousarray(static, dtype=np.float64)
        target = np.ascontiguousarray(target, dtype=np.float64)
        n = target.shape[0]
        if temporal.shape[:2] != (n, 24) or temporal.ndim != 3:
            raise ValueError("temporal must have shape (n, 24, f_t)")
        if static.shape[0] != n or static.ndim != 2:
            raise ValueError("static must have shape (n, f_s)")
        if n and not np.all(target > 0):
            raise ValueError("all targets must be strictly positive")
        self.temporal = temporal
        self.static = static
        self.target = target

    @classmethod
    def empty(cls, f_t: int, f_s: int) -> "SampleSet":
        return cls(
            np.empty((0, 24, f_t)), np.empty((0, f_s)), np.empty((0,))
        )

    def __len__(self) -> int:
        return int(self.target.shape[0])

    def __getitem__(self, index: int) -> PatientSample:
        return PatientSample(
            temporal=self.temporal[index],
            static=self.static[index],
            target_los=float(self.target[index]),
        )

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SampleSet):
            return NotImplemented
        return (
            np.array_equal(self.temporal, other.temporal)
            and np.array_equal(self.static, other.static)
            and np.array_equal(self.target, other.target)
        )

    @staticmethod
    def concat(sets: list["SampleSet"]) -> "SampleSet":
        if not sets:
            raise ValueError("cannot concatenate zero sample sets")
        return SampleSet(
            np.concatenate([s.temporal for s in sets]),
            np.concatenate([s.static for s in sets]),
            np.concatenate([s.target for s in sets]),
        )


@dataclass
class ClientDataset:
    """One simulated hospital: its id plus disjoint train/validation splits."""

    client_id: int
    train: SampleSet
    validation: SampleSet

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ClientDataset):
            return NotImplemented
        return (
            self.client_id == other.client_id
            and self.train == other.train
            and self.validation == other.validation
        )


@dataclass
class Cohort:
    """The full synthetic population plus a pooled global test split."""

    clients: list[ClientDataset]
    global_test: SampleSet
    feature_dims: tuple[int, int]
    seed: int
    spec: CohortSpec

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Cohort):
            return NotImplemented
        return (
            self.spec == other.spec
            and self.seed == other.seed
            and self.feature_dims == other.feature_dims
            and self.global_test == other.global_test
            and self.clients == other.clients
        )

    @property
    def client_ids(self) -> list[int]:
        return [c.client_id for c in self.clients]

    def client(self, client_id: int) -> ClientDataset:
        for c in self.clients:
            if c.client_id == client_id:
                return c
        raise KeyError(f"no client with id {client_id}")

    def pooled_train(self) -> SampleSet:
        return SampleSet.concat([c.train for c in self.clients])

    def pooled_validation(self) -> SampleSet:
        non_empty = [c.validation for c in self.clients if len(c.validation)]
        if not non_empty:
            f_t, f_s = self.feature_dims
            return SampleSet.empty(f_t, f_s)
        return SampleSet.concat(non_empty)

    def total_stays(self) -> int:
        per_client = sum(len(c.train) + len(c.validation) for c in self.clients)
        return per_client + len(self.global_test)


def _largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    """Integer allocation of `total` proportional to `weights`, summing exactly."""
    raw = weights / weights.sum() * total
    base = np.floor(raw).astype(np.int64)
    short = total - int(base.sum())
    # Ties broken by index for determinism.
    order = np.lexsort((np.arange(len(raw)), -(raw - base)))
    base[order[:short]] += 1
    return base


def _target_function(temporal: np.ndarray, static: np.ndarray) -> np.ndarray:
    """The fixed positive map g from features to the noise-free target."""
    ramp_summary = temporal[:, :, 0].mean(axis=1) / _RAMP_MEAN
    return np.exp(0.5 * (ramp_summary + static[:, 0]))


def _generate_block(
    rng: np.random.Generator,
    n: int,
    spec: CohortSpec,
    log_offset: float,
    mu: float,
    signal_sd: float,
) -> SampleSet:
    """Generate one split for one client, given its label-shift offset."""
    severity = mu + log_offset + signal_sd * rng.standard_normal(n)
    noise = rng.normal(0.0, spec.noise_sd, n) if spec.noise_sd > 0 else np.zeros(n)

    steps = np.arange(24, dtype=np.float64)
    ramp = (steps + 1.0) / 24.0
    pulse = 0.5 * (1.0 + np.cos(2.0 * np.pi * steps / 24.0))

    temporal = np.empty((n, 24, spec.f_t), dtype=np.float64)
    temporal[:, :, 0] = severity[:, None] * ramp[None, :]
    temporal[:, :, 1] = severity[:, None] * pulse[None, :]
    if spec.f_t > 2:
        temporal[:, :, 2:] = rng.standard_normal((n, 24, spec.f_t - 2))

    static = np.empty((n, spec.f_s), dtype=np.float64)
    static[:, 0] = severity
    if spec.f_s > 1:
        static[:, 1] = np.tanh(severity - mu)
    if spec.f_s > 2:
        static[:, 2:] = rng.standard_normal((n, spec.f_s - 2))

    target = _target_function(temporal, static) * np.exp(noise)
    return SampleSet(temporal, static, target)


def generate_cohort(spec: CohortSpec, seed: int) -> Cohort:
    """Generate a deterministic synthetic cohort for (spec, seed).

    Raises CohortGenerationError when the size dispersion starves any client
    of training samples, or when the calibration budget is infeasible.
    """
    if seed < 0:
        raise ValueError("seed must be non-negative")
    mu, signal_sd = spec.log_target_params()

    frac_train, frac_val, frac_test = spec.split_fractions
    n_val = int(round(spec.total_stays * frac_val))
    n_test = int(round(spec.total_stays * frac_test))
    n_train = spec.total_stays - n_val - n_test
    if n_train < spec.n_clients:
        raise CohortGenerationError(
            f"train split of {n_train} cannot cover {spec.n_clients} clients"
        )

    rng_sizes = np.random.default_rng([seed, _STREAM_SIZES])
    shares = rng_sizes.lognormal(0.0, spec.size_dispersion, spec.n_clients)
    train_sizes = _largest_remainder(shares, n_train)
    if int(train_sizes.min()) == 0:
        raise CohortGenerationError(
            "a client received zero training samples; size_dispersion is too "
            "large for this total_stays"
        )
    val_sizes = _largest_remainder(shares, n_val)
    test_sizes = _largest_remainder(shares, n_test)

    rng_shifts = np.random.default_rng([seed, _STREAM_SHIFTS])
    offsets = rng_shifts.uniform(-1.0, 1.0, spec.n_clients) * spec.shift_strength

    clients: list[ClientDataset] = []
    test_blocks: list[SampleSet] = []
    for cid in range(spec.n_clients):
        blocks = {}
        for split, size in (
            ("train", int(train_sizes[cid])),
            ("validation", int(val_sizes[cid])),
            ("test", int(test_sizes[cid])),
        ):
            rng = np.random.default_rng([seed, _STREAM_SAMPLES, cid, _SPLIT_TAGS[split]])
            blocks[split] = _generate_block(rng, size, spec, float(offsets[cid]), mu, signal_sd)
        clients.append(
            ClientDataset(client_id=cid, train=blocks["train"], validation=blocks["validation"])
        )
        test_blocks.append(blocks["test"])

    return Cohort(
        clients=clients,
        global_test=SampleSet.concat(test_blocks),
        feature_dims=(spec.f_t, spec.f_s),
        seed=seed,
        spec=spec,
    )


def client_target_histogram(dataset: ClientDataset, edges: BinEdges) -> Histogram:
    """Histogram of the client's TRAIN targets; validation data stays private."""
    indices = edges.assign(dataset.train.target)
    counts = np.bincount(indices, minlength=edges.n_bins)
    return Histogram(counts)


def client_reports(cohort: Cohort, edges: BinEdges | None = None) -> list[ClientReport]:
    """Build the disclosed (histogram, sample size) tuple for every client."""
    edges = edges or BinEdges()
    return [
        ClientReport(
            client_id=c.client_id,
            histogram=client_target_histogram(c, edges),
            n=len(c.train),
        )
        for c in cohort.clients
    ]


def best_constant_msle(targets: np.ndarray) -> tuple[float, float]:
    """Optimal constant predictor under MSLE and its loss (the noise floor).

    The optimum is the geometric-mean-like value exp(mean(log(1+y))) - 1, so
    the floor equals the variance of log(1 + y).
    """
    targets = np.asarray(targets, dtype=np.float64)
    if targets.size == 0:
        raise ValueError("targets must be non-empty")
    logs = np.log1p(targets)
    best = float(np.expm1(logs.mean()))
    floor = float(np.mean((logs - logs.mean()) ** 2))
    return best, floor


# ---------------------------------------------------------------------------
# Persistence: versioned binary format.
#
#   magic "FRC1" | u32 version | u32 header length | header JSON (utf-8)
#   per client, in id order: train block, validation block
#   global test block
#   sha256 digest (32 bytes) of everything before it
#
# A block is the raw little-endian float64 bytes of target (n,), static
# (n, f_s) and temporal (n, 24, f_t), in that order, C-contiguous. Block
# sizes are derived from the counts recorded in the header, so truncation is
# detected by length before the checksum is verified.
# ---------------------------------------------------------------------------


def _spec_to_json_dict(spec: CohortSpec) -> dict:
    payload = asdict(spec)
    payload["split_fractions"] = list(spec.split_fractions)
    return payload


def _spec_from_json_dict(payload: dict) -> CohortSpec:
    payload = dict(payload)
    payload["split_fractions"] = tuple(payload["split_fractions"])
    return CohortSpec(**payload)


def _write_block(buf: io.BytesIO, block: SampleSet) -> None:
    buf.write(block.target.astype("<f8").tobytes())
    buf.write(block.static.astype("<f8").tobytes())
    buf.write(block.temporal.astype("<f8").tobytes())


def _read_block(view: memoryview, offset: int, n: int, f_t: int, f_s: int) -> tuple[SampleSet, int]:
    sizes = (n, n * f_s, n * 24 * f_t)
    arrays = []
    for count in sizes:
        nbytes = count * 8
        if offset + nbytes > len(view):
            raise CohortTruncatedError("file ends inside a sample block")
        arrays.append(np.frombuffer(view[offset : offset + nbytes], dtype="<f8").copy())
        offset += nbytes
    target, static, temporal = arrays
    return (
        SampleSet(temporal.reshape(n, 24, f_t), static.reshape(n, f_s), target),
        offset,
    )


def save_cohort(cohort: Cohort, path) -> None:
    """Write the cohort to `path` in the versioned binary format."""
    header = {
        "spec": _spec_to_json_dict(cohort.spec),
        "seed": cohort.seed,
        "f_t": cohort.feature_dims[0],
        "f_s": cohort.feature_dims[1],
        "client_ids": cohort.client_ids,
        "train_counts": [len(c.train) for c in cohort.clients],
        "validation_counts": [len(c.validation) for c in cohort.clients],
        "test_count": len(cohort.global_test),
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")

    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(FORMAT_VERSION.to_bytes(4, "little"))
    buf.write(len(header_bytes).to_bytes(4, "little"))
    buf.write(header_bytes)
    for client in cohort.clients:
        _write_block(buf, client.train)
        _write_block(buf, client.validation)
    _write_block(buf, cohort.global_test)
    payload = buf.getvalue()
    digest = hashlib.sha256(payload).digest()

    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(digest)


def load_cohort(path) -> Cohort:
    """Read a cohort written by save_cohort; round-trips bit-for-bit."""
    with open(path, "rb") as fh:
        data = fh.read()

    if len(data) < len(MAGIC) + 8:
        raise CohortTruncatedError("file too short for magic and version")
    if data[: len(MAGIC)] != MAGIC:
        raise CohortFormatError("bad magic bytes; not a cohort file")
    version = int.from_bytes(data[4:8], "little")
    if version != FORMAT_VERSION:
        raise CohortVersionError(f"unsupported cohort format version {version}")

    header_len = int.from_bytes(data[8:12], "little")
    header_end = 12 + header_len
    if len(data) < header_end + 32:
        raise CohortTruncatedError("file ends inside the header")
    try:
        header = json.loads(data[12:header_end].decode("utf-8"))
        spec = _spec_from_json_dict(header["spec"])
        client_ids = header["client_ids"]
        train_counts = header["train_counts"]
        val_counts = header["validation_counts"]
        test_count = header["test_count"]
        f_t, f_s = int(header["f_t"]), int(header["f_s"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CohortFormatError(f"malformed cohort header: {exc}") from exc

    payload, stored_digest = data[:-32], data[-32:]
    view = memoryview(payload)
    offset = header_end
    clients = []
    for cid, n_train, n_val in zip(client_ids, train_counts, val_counts):
        train, offset = _read_block(view, offset, int(n_train), f_t, f_s)
        val, offset = _read_block(view, offset, int(n_val), f_t, f_s)
        clients.append(ClientDataset(client_id=int(cid), train=train, validation=val))
    test, offset = _read_block(view, offset, int(test_count), f_t, f_s)
    if offset != len(payload):
        raise CohortTruncatedError("trailing bytes after the declared blocks")

    if hashlib.sha256(payload).digest() != stored_digest:
        raise CohortChecksumError("cohort file checksum mismatch")

    return Cohort(
        clients=clients,
        global_test=test,
        feature_dims=(f_t, f_s),
        seed=int(header["seed"]),
        spec=spec,
    )


def export_csv(cohort: Cohort, path) -> None:
    """One row per sample: ids, split, target, static features, temporal means.

    Full 24-step temporal dumps are impractically wide, so each temporal
    feature is summarized by its time-average (enough to inspect the signal
    channels and spot-check distributions).
    """
    f_t, f_s = cohort.feature_dims
    columns = (
        ["client_id", "split", "target_los"]
        + [f"static_{j}" for j in range(f_s)]
        + [f"temporal_mean_{j}" for j in range(f_t)]
    )

    def rows(client_id: int, split: str, block: SampleSet):
        means = block.temporal.mean(axis=1)
        for i in range(len(block)):
            values = [str(client_id), split, repr(float(block.target[i]))]
            values += [repr(float(v)) for v in block.static[i]]
            values += [repr(float(v)) for v in means[i]]
            yield ",".join(values)

    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(columns) + "\n")
        for client in cohort.clients:
            for line in rows(client.client_id, "train", client.train):
                fh.write(line + "\n")
            for line in rows(client.client_id, "validation", client.validation):
                fh.write(line + "\n")
        # Test samples are pooled; client attribution is intentionally dropped.
        for line in rows(-1, "test", cohort.global_test):
            fh.write(line + "\n")
