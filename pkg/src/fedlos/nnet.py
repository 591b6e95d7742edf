"""From-scratch 2-layer GRU regressor for strictly positive targets.

Everything is plain float64 numpy: forward pass, exact backpropagation
through time, mean-squared-log-error loss, decoupled-weight-decay Adam, and
inverted dropout between the two recurrent layers. No autograd framework is
involved, which keeps runs bitwise reproducible and makes the gradients
directly checkable against finite differences.

Per timestep each layer computes, with logistic sigmoid and elementwise *:

    r = sigmoid(W_ir x + b_ir + W_hr h + b_hr)
    z = sigmoid(W_iz x + b_iz + W_hz h + b_hz)
    n = tanh(W_in x + b_in + r * (W_hn h + b_hn))
    h' = (1 - z) * n + z * h

The prediction is ReLU(W_y h_final + b_y), read off the last timestep only,
so outputs can never go negative. Static features are concatenated onto
every timestep's temporal features before entering layer 1.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

_LAYER_FIELDS = (
    "w_ir", "w_iz", "w_in",
    "w_hr", "w_hz", "w_hn",
    "b_ir", "b_iz", "b_in",
    "b_hr", "b_hz", "b_hn",
)
FLATTEN_ORDER_TAG = "gru2-flat/1"
SEQ_LEN = 24


@dataclass(frozen=True)
class TrainHyper:
    """Training hyperparameters; defaults are the production settings."""

    layers: int = 2
    hidden: int = 32
    learning_rate: float = 0.005
    batch_size: int = 128
    weight_decay: float = 0.005
    dropout: float = 0.05
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.layers < 1 or self.hidden < 1 or self.batch_size < 1:
            raise ValueError("layers, hidden and batch_size must be positive")
        if self.learning_rate <= 0 or self.adam_eps <= 0:
            raise ValueError("learning_rate and adam_eps must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError("dropout must be in [0, 1)")
        if not (0.0 <= self.adam_beta1 < 1.0 and 0.0 <= self.adam_beta2 < 1.0):
            raise ValueError("adam betas must be in [0, 1)")


@dataclass
class GruLayerParams:
    """One recurrent layer: three input and three hidden matrices plus biases."""

    w_ir: np.ndarray
    w_iz: np.ndarray
    w_in: np.ndarray
    w_hr: np.ndarray
    w_hz: np.ndarray
    w_hn: np.ndarray
    b_ir: np.ndarray
    b_iz: np.ndarray
    b_in: np.ndarray
    b_hr: np.ndarray
    b_hz: np.ndarray
    b_hn: np.ndarray

    @property
    def hidden(self) -> int:
        return self.w_ir.shape[0]

    @property
    def input_dim(self) -> int:
        return self.w_ir.shape[1]

    def stacked(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(input weights 3N x D, hidden weights 3N x N, input bias, hidden bias)."""
        wi = np.vstack((self.w_ir, self.w_iz, self.w_in))
        wh = np.vstack((self.w_hr, self.w_hz, self.w_hn))
        bi = np.concatenate((self.b_ir, self.b_iz, self.b_in))
        bh = np.concatenate((self.b_hr, self.b_hz, self.b_hn))
        return wi, wh, bi, bh


@dataclass
class ModelParams:
    """All weights of the stacked GRU plus the scalar output head.

    Exposes a fixed-order flatten/unflatten bijection onto a single float64
    vector, which is what aggregation, the optimizer and checkpoints operate
    on. The order is: per layer, the fields of GruLayerParams in declaration
    order, then w_y and b_y.
    """

    layers: list[GruLayerParams]
    w_y: np.ndarray
    b_y: np.ndarray

    @property
    def hidden(self) -> int:
        return self.layers[0].hidden

    @property
    def input_dim(self) -> int:
        return self.layers[0].input_dim

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def _arrays(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend(getattr(layer, name) for name in _LAYER_FIELDS)
        out.append(self.w_y)
        out.append(self.b_y)
        return out

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self._arrays()])

    @property
    def param_count(self) -> int:
        return sum(a.size for a in self._arrays())

    def unflatten(self, vec: np.ndarray) -> "ModelParams":
        """Rebuild params with this instance's shapes from a flat vector."""
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.param_count,):
            raise ValueError(f"expected flat vector of length {self.param_count}")
        offset = 0
        layers = []
        for layer in self.layers:
            fields = {}
            for name in _LAYER_FIELDS:
                shape = getattr(layer, name).shape
                size = int(np.prod(shape))
                fields[name] = vec[offset : offset + size].reshape(shape).copy()
                offset += size
            layers.append(GruLayerParams(**fields))
        w_y = vec[offset : offset + self.w_y.size].reshape(self.w_y.shape).copy()
        offset += self.w_y.size
        b_y = vec[offset : offset + self.b_y.size].reshape(self.b_y.shape).copy()
        return ModelParams(layers=layers, w_y=w_y, b_y=b_y)

    def decay_mask(self) -> np.ndarray:
        """1.0 for weight-matrix coordinates, 0.0 for biases (decay exempt)."""
        parts = []
        for a in self._arrays():
            parts.append(np.full(a.size, 1.0 if a.ndim == 2 else 0.0))
        return np.concatenate(parts)

    def flatten_field_names(self) -> list[str]:
        names = []
        for i in range(self.n_layers):
            names.extend(f"layer{i + 1}.{name}" for name in _LAYER_FIELDS)
        names.extend(["head.w_y", "head.b_y"])
        return names

    def copy(self) -> "ModelParams":
        return self.unflatten(self.flatten())


def init_params(hyper: TrainHyper, feature_dims: tuple[int, int], seed) -> ModelParams:
    """Seeded initialization: weights uniform(-k, k) with k = 1/sqrt(hidden), biases zero.

    `feature_dims` is (temporal feature count, static feature count); layer 1
    consumes their concatenation.
    """
    rng = np.random.default_rng(seed)
    n = hyper.hidden
    k = 1.0 / np.sqrt(n)
    input_dims = [feature_dims[0] + feature_dims[1]] + [n] * (hyper.layers - 1)

    layers = []
    for d in input_dims:
        weights = {
            name: rng.uniform(-k, k, (n, d if name.startswith("w_i") else n))
            for name in _LAYER_FIELDS[:6]
        }
        biases = {name: np.zeros(n) for name in _LAYER_FIELDS[6:]}
        layers.append(GruLayerParams(**weights, **biases))
    w_y = rng.uniform(-k, k, (1, n))
    b_y = np.zeros(1)
    return ModelParams(layers=layers, w_y=w_y, b_y=b_y)


@dataclass
class _LayerCache:
    inputs: np.ndarray     # (B, T, D) what the layer consumed
    hidden: np.ndarray     # (B, T+1, N) h_0 .. h_T
    reset: np.ndarray      # (B, T, N)
    update: np.ndarray     # (B, T, N)
    candidate: np.ndarray  # (B, T, N)
    hidden_lin: np.ndarray # (B, T, N) = W_hn h_prev + b_hn


@dataclass
class ForwardCache:
    """Intermediates retained by the forward pass for exact backprop."""

    layer_caches: list[_LayerCache]
    dropout_scale: np.ndarray | None  # (B, T, N) mask / keep-prob, or None in eval
    head_lin: np.ndarray              # (B,) pre-ReLU head activation
    y_hat: np.ndarray                 # (B,)


def _layer_forward(layer: GruLayerParams, inputs: np.ndarray) -> _LayerCache:
    batch, steps, _ = inputs.shape
    n = layer.hidden
    wi, wh, bi, bh = layer.stacked()
    wh_t = np.ascontiguousarray(wh.T)

    # Input-side gate activations for all timesteps in one matmul.
    gates_in = inputs.reshape(batch * steps, -1) @ wi.T
    gates_in += bi
    gates_in = gates_in.reshape(batch, steps, 3 * n)

    hidden = np.zeros((batch, steps + 1, n))
    reset = np.empty((batch, steps, n))
    update = np.empty((batch, steps, n))
    candidate = np.empty((batch, steps, n))
    hidden_lin = np.empty((batch, steps, n))

    gates_h = np.empty((batch, 3 * n))
    scratch = np.empty((batch, n))
    h = hidden[:, 0]
    for t in range(steps):
        np.matmul(h, wh_t, out=gates_h)
        gates_h += bh
        r = reset[:, t]
        z = update[:, t]
        c = candidate[:, t]
        h_lin = hidden_lin[:, t]

        gates_h[:, : 2 * n] += gates_in[:, t, : 2 * n]
        expit(gates_h[:, :n], out=r)
        expit(gates_h[:, n : 2 * n], out=z)
        h_lin[...] = gates_h[:, 2 * n :]
        np.multiply(r, h_lin, out=scratch)
        scratch += gates_in[:, t, 2 * n :]
        np.tanh(scratch, out=c)
        # h' = (1 - z) * c + z * h, computed as c + z * (h - c).
        h_next = hidden[:, t + 1]
        np.subtract(h, c, out=h_next)
        h_next *= z
        h_next += c
        h = h_next

    return _LayerCache(
        inputs=inputs, hidden=hidden, reset=reset,
        update=update, candidate=candidate, hidden_lin=hidden_lin,
    )


def forward(
    params: ModelParams,
    inputs: np.ndarray,
    train_mode: bool = False,
    dropout_rate: float = 0.0,
    dropout_seed: int = 0,
) -> tuple[np.ndarray, ForwardCache]:
    """Run the full network on a batch of shape (B, 24, D); returns (y_hat, cache).

    In train mode an inverted-scaling dropout mask (kept units divided by the
    keep probability) is applied to layer-1 outputs; the mask is derived from
    `dropout_seed` so the backward pass can reuse it exactly.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 3 or inputs.shape[1] != SEQ_LEN or inputs.shape[2] != params.input_dim:
        raise ValueError(
            f"expected inputs of shape (B, {SEQ_LEN}, {params.input_dim}), got {inputs.shape}"
        )

    layer_caches = []
    dropout_scale = None
    current = inputs
    for index, layer in enumerate(params.layers):
        cache = _layer_forward(layer, current)
        layer_caches.append(cache)
        current = cache.hidden[:, 1:]
        if index == 0 and len(params.layers) > 1 and train_mode and dropout_rate > 0.0:
            rng = np.random.default_rng(dropout_seed)
            keep = rng.random(current.shape) >= dropout_rate
            dropout_scale = keep / (1.0 - dropout_rate)
            current = current * dropout_scale

    final_hidden = current[:, -1]
    head_lin = final_hidden @ params.w_y[0] + params.b_y[0]
    y_hat = np.maximum(head_lin, 0.0)
    return y_hat, ForwardCache(
        layer_caches=layer_caches,
        dropout_scale=dropout_scale,
        head_lin=head_lin,
        y_hat=y_hat,
    )


def gru_forward(
    params: ModelParams,
    x_seq: np.ndarray,
    train_mode: bool = False,
    dropout_seed: int = 0,
    dropout_rate: float = 0.0,
) -> tuple[float, ForwardCache]:
    """Single-sequence prediction: x_seq is (24, D); returns (y_hat >= 0, cache)."""
    x_seq = np.asarray(x_seq, dtype=np.float64)
    y_hat, cache = forward(
        params, x_seq[None, :, :], train_mode=train_mode,
        dropout_rate=dropout_rate, dropout_seed=dropout_seed,
    )
    return float(y_hat[0]), cache


def msle_loss(y_hat: np.ndarray, y: np.ndarray) -> float:
    """Mean squared error between natural logs of (1 + value)."""
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y_hat.shape != y.shape:
        raise ValueError("prediction and target shapes differ")
    if np.any(y_hat < 0) or np.any(y < 0):
        raise ValueError("msle requires non-negative inputs")
    return float(np.mean((np.log1p(y) - np.log1p(y_hat)) ** 2))


def _layer_backward(
    layer: GruLayerParams, cache: _LayerCache, delta_hidden_seq: np.ndarray
) -> tuple[GruLayerParams, np.ndarray]:
    """BPTT through one layer.

    `delta_hidden_seq` (B, T, N) holds the loss gradient arriving at each
    step's output from above; returns (parameter grads, gradient w.r.t. the
    layer's input sequence).
    """
    batch, steps, n = delta_hidden_seq.shape
    wi, wh, _, _ = layer.stacked()

    delta_in = np.empty((batch, steps, 3 * n))
    delta_hid = np.empty((batch, steps, 3 * n))
    carry = np.zeros((batch, n))
    dh = np.empty((batch, n))
    t1 = np.empty((batch, n))
    t2 = np.empty((batch, n))
    for t in range(steps - 1, -1, -1):
        np.add(delta_hidden_seq[:, t], carry, out=dh)
        h_prev = cache.hidden[:, t]
        r, z, c = cache.reset[:, t], cache.update[:, t], cache.candidate[:, t]
        h_lin = cache.hidden_lin[:, t]

        da_r = delta_in[:, t, :n]
        da_z = delta_in[:, t, n : 2 * n]
        da_n = delta_in[:, t, 2 * n :]
        da_hn = delta_hid[:, t, 2 * n :]

        # da_n = dh * (1 - z) * (1 - c^2)
        np.multiply(c, c, out=t1)
        np.subtract(1.0, t1, out=t1)
        np.subtract(1.0, z, out=t2)
        t2 *= dh
        np.multiply(t2, t1, out=da_n)
        # da_hn = da_n * r;  da_r = da_n * h_lin * r * (1 - r)
        np.multiply(da_n, r, out=da_hn)
        np.subtract(1.0, r, out=t1)
        t1 *= r
        t1 *= h_lin
        np.multiply(da_n, t1, out=da_r)
        # da_z = dh * (h_prev - c) * z * (1 - z)
        np.subtract(h_prev, c, out=t1)
        t1 *= dh
        np.subtract(1.0, z, out=t2)
        t2 *= z
        np.multiply(t1, t2, out=da_z)

        delta_hid[:, t, : 2 * n] = delta_in[:, t, : 2 * n]

        np.multiply(dh, z, out=carry)
        carry += delta_hid[:, t] @ wh

    flat_in = delta_in.reshape(batch * steps, 3 * n)
    flat_hid = delta_hid.reshape(batch * steps, 3 * n)
    grad_wi = flat_in.T @ cache.inputs.reshape(batch * steps, -1)
    grad_wh = flat_hid.T @ cache.hidden[:, :steps].reshape(batch * steps, n)
    bias_in = flat_in.sum(axis=0)
    bias_hid = flat_hid.sum(axis=0)
    delta_inputs = (flat_in @ wi).reshape(batch, steps, -1)

    grads = GruLayerParams(
        w_ir=grad_wi[:n], w_iz=grad_wi[n : 2 * n], w_in=grad_wi[2 * n :],
        w_hr=grad_wh[:n], w_hz=grad_wh[n : 2 * n], w_hn=grad_wh[2 * n :],
        b_ir=bias_in[:n], b_iz=bias_in[n : 2 * n], b_in=bias_in[2 * n :],
        b_hr=bias_hid[:n], b_hz=bias_hid[n : 2 * n], b_hn=bias_hid[2 * n :],
    )
    return grads, delta_inputs


def backward(
    params: ModelParams,
    inputs: np.ndarray,
    targets: np.ndarray,
    hyper: TrainHyper,
    dropout_seed: int = 0,
) -> tuple[float, ModelParams]:
    """Mean MSLE over the batch and its exact gradient for every parameter.

    Runs the forward pass in train mode (so the dropout mask drawn from
    `dropout_seed` is identical in both directions), then backpropagates
    through the ReLU head (subgradient 0 at the kink) and through every
    timestep of both recurrent layers.
    """
    targets = np.asarray(targets, dtype=np.float64)
    if targets.ndim != 1 or targets.shape[0] == 0:
        raise ValueError("targets must be a non-empty vector")
    if np.any(targets < 0):
        raise ValueError("targets must be non-negative")

    y_hat, cache = forward(
        params, inputs, train_mode=True,
        dropout_rate=hyper.dropout, dropout_seed=dropout_seed,
    )
    batch = targets.shape[0]
    log_err = np.log1p(y_hat) - np.log1p(targets)
    loss = float(np.mean(log_err**2))

    d_yhat = 2.0 * log_err / ((1.0 + y_hat) * batch)
    d_head_lin = np.where(cache.head_lin > 0.0, d_yhat, 0.0)

    top = cache.layer_caches[-1]
    final_hidden = top.hidden[:, -1]
    grad_w_y = (d_head_lin @ final_hidden)[None, :]
    grad_b_y = np.array([d_head_lin.sum()])

    steps = inputs.shape[1]
    delta_seq = np.zeros((batch, steps, params.hidden))
    delta_seq[:, -1] = d_head_lin[:, None] * params.w_y[0]

    layer_grads: list[GruLayerParams] = [None] * params.n_layers  # type: ignore[list-item]
    for index in range(params.n_layers - 1, -1, -1):
        grads, delta_inputs = _layer_backward(
            params.layers[index], cache.layer_caches[index], delta_seq
        )
        layer_grads[index] = grads
        if index > 0:
            delta_seq = delta_inputs
            if index == 1 and cache.dropout_scale is not None:
                delta_seq = delta_seq * cache.dropout_scale

    return loss, ModelParams(layers=layer_grads, w_y=grad_w_y, b_y=grad_b_y)


@dataclass
class OptimizerState:
    """Adam moment estimates over the flattened parameter vector."""

    first_moment: np.ndarray
    second_moment: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, param_count: int) -> "OptimizerState":
        return cls(np.zeros(param_count), np.zeros(param_count), 0)


def adamw_step(
    params: ModelParams,
    grads: ModelParams,
    state: OptimizerState,
    hyper: TrainHyper,
) -> tuple[ModelParams, OptimizerState]:
    """One bias-corrected Adam update with decoupled weight decay.

    Decay applies to weight matrices only; biases are exempt. Inputs are not
    mutated; fresh params and state are returned.
    """
    flat = params.flatten()
    grad = grads.flatten()
    if grad.shape != flat.shape:
        raise ValueError("gradient and parameter vectors differ in length")
    if state.first_moment.shape != flat.shape:
        raise ValueError("optimizer state does not match parameter count")

    step = state.step + 1
    b1, b2 = hyper.adam_beta1, hyper.adam_beta2
    m = b1 * state.first_moment + (1.0 - b1) * grad
    v = b2 * state.second_moment + (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1**step)
    v_hat = v / (1.0 - b2**step)

    update = m_hat / (np.sqrt(v_hat) + hyper.adam_eps)
    if hyper.weight_decay > 0.0:
        update = update + hyper.weight_decay * (flat * params.decay_mask())
    new_flat = flat - hyper.learning_rate * update
    return params.unflatten(new_flat), OptimizerState(m, v, step)


def train_epochs(
    params: ModelParams,
    data: tuple[np.ndarray, np.ndarray],
    hyper: TrainHyper,
    epochs: int,
    seed,
    on_epoch_end=None,
) -> tuple[ModelParams, list[float]]:
    """Seeded mini-batch training; returns (updated params, per-epoch mean loss).

    Each epoch reshuffles with the seeded stream and walks batches of
    `hyper.batch_size` (the last batch may be smaller). One fresh optimizer
    state spans all epochs. The per-batch dropout seed is drawn from the same
    stream, so a fixed seed reproduces training bitwise. `on_epoch_end`, if
    given, is called as on_epoch_end(epoch_index, params) after each epoch and
    must not touch the RNG.
    """
    inputs, targets = data
    n = targets.shape[0]
    if n == 0:
        raise ValueError("training data must be non-empty")
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    if epochs == 0:
        return params, []

    rng = np.random.default_rng(seed)
    state = OptimizerState.zeros(params.param_count)
    epoch_losses: list[float] = []
    for epoch in range(epochs):
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, hyper.batch_size):
            idx = perm[start : start + hyper.batch_size]
            dropout_seed = int(rng.integers(0, 2**63))
            loss, grads = backward(params, inputs[idx], targets[idx], hyper, dropout_seed)
            params, state = adamw_step(params, grads, state, hyper)
            total += loss * idx.shape[0]
        epoch_losses.append(total / n)
        if on_epoch_end is not None:
            on_epoch_end(epoch, params)
    return params, epoch_losses


def predict(params: ModelParams, inputs: np.ndarray, chunk_size: int = 2048) -> np.ndarray:
    """Deterministic eval-mode predictions for (n, 24, D) inputs."""
    inputs = np.asarray(inputs, dtype=np.float64)
    outputs = []
    for start in range(0, inputs.shape[0], chunk_size):
        y_hat, _ = forward(params, inputs[start : start + chunk_size], train_mode=False)
        outputs.append(y_hat)
    if not outputs:
        return np.empty((0,))
    return np.concatenate(outputs)


def fuse_sequences(temporal: np.ndarray, static: np.ndarray) -> np.ndarray:
    """Concatenate static features onto every timestep: (n, 24, f_t + f_s)."""
    n, steps, f_t = temporal.shape
    fused = np.empty((n, steps, f_t + static.shape[1]), dtype=np.float64)
    fused[:, :, :f_t] = temporal
    fused[:, :, f_t:] = static[:, None, :]
    return fused


def save_checkpoint(params: ModelParams, path, hyper: TrainHyper | None = None, meta: dict | None = None) -> None:
    """Write the flattened f64 vector to `path` and a JSON sidecar to `path`.json."""
    path = Path(path)
    flat = params.flatten().astype("<f8")
    raw = flat.tobytes()
    path.write_bytes(raw)
    sidecar = {
        "format": FLATTEN_ORDER_TAG,
        "layers": params.n_layers,
        "hidden": params.hidden,
        "input_dim": params.input_dim,
        "param_count": params.param_count,
        "sha256": hashlib.sha256(raw).hexdigest(),
        "flatten_order": params.flatten_field_names(),
    }
    if hyper is not None:
        sidecar["hyper"] = {k: getattr(hyper, k) for k in TrainHyper.__dataclass_fields__}
    if meta:
        sidecar["meta"] = meta
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    """Read a checkpoint written by save_checkpoint; returns (params, sidecar)."""
    path = Path(path)
    sidecar = json.loads(Path(str(path) + ".json").read_text())
    if sidecar.get("format") != FLATTEN_ORDER_TAG:
        raise ValueError(f"unsupported checkpoint format {sidecar.get('format')!r}")
    raw = path.read_bytes()
    if hashlib.sha256(raw).hexdigest() != sidecar["sha256"]:
        raise ValueError("checkpoint bytes do not match sidecar checksum")
    flat = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    if flat.shape[0] != sidecar["param_count"]:
        raise ValueError("checkpoint length does not match sidecar param_count")

    n = int(sidecar["hidden"])
    template_hyper = TrainHyper(layers=int(sidecar["layers"]), hidden=n)
    input_dim = int(sidecar["input_dim"])
    template = init_params(template_hyper, (input_dim, 0), seed=0)
    return template.unflatten(flat), sidecar
