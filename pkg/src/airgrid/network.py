"""The three prediction models: a shared-weight 1-D convolutional branch over
sensor windows concatenated with dense features, one hidden ReLU layer, and a
two-output linear head predicting log1p-space concentrations.

Everything is explicit numpy: forward pass with cached activations, analytic
backward pass, masked squared-log-error loss, and Adam. Convolutions are
VALID (no padding), pooling is max with stride 2 and floor semantics, ties
route the gradient to the first index.

Shape chain for the default window of 16 steps x 4 channels:
16 -> conv(3) -> 14 -> pool(2) -> 7 -> conv(3) -> 5 -> pool(2) -> 2, times 8
filters = 16 values per sensor, 80 for the 5 sensors. The branch weights are
shared across sensors, so permuting the sensor windows permutes the branch
output blocks correspondingly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataset import NormStats, normalize_dense, normalize_windows
from .errors import DataError, NumericalError
from .features import DENSE_WIDTH, FLAG_COUNT, FeatureVector, N_CHANNELS, N_NEIGHBORS, VARIANTS, WINDOW_LEN

MODEL_MAGIC = "AGMODEL"
MODEL_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    variant: str
    hidden_units: int = 128
    conv1_kernel: int = 3
    conv1_filters: int = 32
    conv2_kernel: int = 3
    conv2_filters: int = 8
    pool_size: int = 2
    n_sensors: int = N_NEIGHBORS
    window_len: int = WINDOW_LEN
    n_channels: int = N_CHANNELS
    n_dense: int = 0
    n_flags: int = 0
    seed: int = 0

    @classmethod
    def for_variant(cls, variant: str, seed: int = 0, **overrides) -> "ModelConfig":
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        cfg = cls(
            variant=variant,
            n_dense=DENSE_WIDTH[variant],
            n_flags=FLAG_COUNT[variant],
            seed=seed,
        )
        return replace(cfg, **overrides) if overrides else cfg

    @property
    def has_branch(self) -> bool:
        return self.variant != "station"

    @property
    def conv1_out(self) -> int:
        return self.window_len - self.conv1_kernel + 1

    @property
    def pool1_out(self) -> int:
        return self.conv1_out // self.pool_size

    @property
    def conv2_out(self) -> int:
        return self.pool1_out - self.conv2_kernel + 1

    @property
    def pool2_out(self) -> int:
        return self.conv2_out // self.pool_size

    @property
    def branch_per_sensor(self) -> int:
        return self.pool2_out * self.conv2_filters

    @property
    def branch_out(self) -> int:
        return self.n_sensors * self.branch_per_sensor if self.has_branch else 0

    @property
    def dense_in(self) -> int:
        return self.n_dense + self.n_flags

    @property
    def concat_dim(self) -> int:
        return self.branch_out + self.dense_in

    def validate(self):
        if self.has_branch and (self.conv1_out < 1 or self.conv2_out < 1 or self.pool2_out < 1):
            raise ValueError(f"window length {self.window_len} too short for the conv/pool chain")
        if self.concat_dim < 1 or self.hidden_units < 1:
            raise ValueError("degenerate layer sizes")


def init_weights(config: ModelConfig, seed: int | None = None) -> dict[str, np.ndarray]:
    """Uniform fan-in-scaled initialization (limit sqrt(6/fan_in)), zero biases."""
    config.validate()
    rng = np.random.default_rng(config.seed if seed is None else seed)

    def uniform(shape, fan_in):
        limit = math.sqrt(6.0 / fan_in)
        return rng.uniform(-limit, limit, shape)

    weights: dict[str, np.ndarray] = {}
    if config.has_branch:
        weights["conv1_w"] = uniform(
            (config.conv1_kernel, config.n_channels, config.conv1_filters),
            config.conv1_kernel * config.n_channels,
        )
        weights["conv1_b"] = np.zeros(config.conv1_filters)
        weights["conv2_w"] = uniform(
            (config.conv2_kernel, config.conv1_filters, config.conv2_filters),
            config.conv2_kernel * config.conv1_filters,
        )
        weights["conv2_b"] = np.zeros(config.conv2_filters)
    weights["hidden_w"] = uniform((config.concat_dim, config.hidden_units), config.concat_dim)
    weights["hidden_b"] = np.zeros(config.hidden_units)
    weights["out_w"] = uniform((config.hidden_units, 2), config.hidden_units)
    weights["out_b"] = np.zeros(2)
    return weights


def _conv1d(x, w, b):
    # x (N, T, Cin), w (k, Cin, F) -> (N, T-k+1, F)
    k = w.shape[0]
    t_out = x.shape[1] - k + 1
    out = np.broadcast_to(b, (x.shape[0], t_out, w.shape[2])).copy()
    for dt in range(k):
        out += x[:, dt : dt + t_out, :] @ w[dt]
    return out


def _conv1d_backward(x, w, dout):
    k = w.shape[0]
    t_out = dout.shape[1]
    db = dout.sum(axis=(0, 1))
    dw = np.empty_like(w)
    dx = np.zeros_like(x)
    for dt in range(k):
        xs = x[:, dt : dt + t_out, :]
        dw[dt] = np.tensordot(xs, dout, axes=([0, 1], [0, 1]))
        dx[:, dt : dt + t_out, :] += dout @ w[dt].T
    return dx, dw, db


def _maxpool(x, pool):
    # x (N, T, F) -> (N, T//pool, F); floor drops trailing elements.
    n, t, f = x.shape
    t_out = t // pool
    xr = x[:, : t_out * pool, :].reshape(n, t_out, pool, f)
    idx = xr.argmax(axis=2)  # first index on ties
    out = np.take_along_axis(xr, idx[:, :, None, :], axis=2)[:, :, 0, :]
    return out, idx


def _maxpool_backward(dout, idx, t_in, pool):
    n, t_out, f = dout.shape
    buf = np.zeros((n, t_out, pool, f))
    np.put_along_axis(buf, idx[:, :, None, :], dout[:, :, None, :], axis=2)
    dx = np.zeros((n, t_in, f))
    dx[:, : t_out * pool, :] = buf.reshape(n, t_out * pool, f)
    return dx


def forward(weights, config: ModelConfig, windows, dense):
    """Predictions in log1p space for a batch of normalized features.

    ``windows``: (B, S, T, C) or None for the station variant;
    ``dense``: (B, n_dense + n_flags). Returns (predictions (B, 2), cache).
    """
    batch = dense.shape[0]
    if batch == 0:
        raise DataError("forward: empty batch")
    if dense.shape[1] != config.dense_in:
        raise ValueError(f"dense width {dense.shape[1]} != expected {config.dense_in}")
    cache = {"dense": dense}
    if config.has_branch:
        if windows is None or windows.shape != (batch, config.n_sensors, config.window_len, config.n_channels):
            raise ValueError("window tensor shape mismatch")
        x = windows.reshape(batch * config.n_sensors, config.window_len, config.n_channels)
        z1 = _conv1d(x, weights["conv1_w"], weights["conv1_b"])
        a1 = np.maximum(z1, 0.0)
        p1, i1 = _maxpool(a1, config.pool_size)
        z2 = _conv1d(p1, weights["conv2_w"], weights["conv2_b"])
        a2 = np.maximum(z2, 0.0)
        p2, i2 = _maxpool(a2, config.pool_size)
        flat = p2.reshape(batch, config.branch_out)
        concat = np.concatenate([flat, dense], axis=1)
        cache.update(x=x, z1=z1, i1=i1, p1=p1, z2=z2, i2=i2)
    else:
        concat = dense
    zh = concat @ weights["hidden_w"] + weights["hidden_b"]
    h = np.maximum(zh, 0.0)
    out = h @ weights["out_w"] + weights["out_b"]
    cache.update(concat=concat, zh=zh, h=h)
    return out, cache


def backward(weights, config: ModelConfig, cache, dout):
    """Analytic parameter gradients for the cached forward pass."""
    h, zh, concat = cache["h"], cache["zh"], cache["concat"]
    grads = {
        "out_w": h.T @ dout,
        "out_b": dout.sum(axis=0),
    }
    dh = dout @ weights["out_w"].T
    dzh = dh * (zh > 0.0)
    grads["hidden_w"] = concat.T @ dzh
    grads["hidden_b"] = dzh.sum(axis=0)
    if config.has_branch:
        dconcat = dzh @ weights["hidden_w"].T
        batch = dout.shape[0]
        dflat = dconcat[:, : config.branch_out]
        dp2 = dflat.reshape(batch * config.n_sensors, config.pool2_out, config.conv2_filters)
        da2 = _maxpool_backward(dp2, cache["i2"], config.conv2_out, config.pool_size)
        dz2 = da2 * (cache["z2"] > 0.0)
        dp1, dw2, db2 = _conv1d_backward(cache["p1"], weights["conv2_w"], dz2)
        da1 = _maxpool_backward(dp1, cache["i1"], config.conv1_out, config.pool_size)
        dz1 = da1 * (cache["z1"] > 0.0)
        _, dw1, db1 = _conv1d_backward(cache["x"], weights["conv1_w"], dz1)
        grads.update(conv1_w=dw1, conv1_b=db1, conv2_w=dw2, conv2_b=db2)
    return grads


def msle_loss(predictions, targets, masks):
    """Mean squared error between log1p-space predictions and log1p targets,
    averaged over the non-missing (point, pollutant) pairs.

    ``targets`` are raw concentrations (NaN where missing); masked pairs
    contribute neither loss nor gradient. Raises when nothing is supervised.
    """
    masks = np.asarray(masks, dtype=bool)
    m = int(masks.sum())
    if m == 0:
        raise DataError("msle_loss: batch has no supervised pairs")
    safe = np.where(masks, targets, 0.0)
    diff = np.where(masks, predictions - np.log1p(safe), 0.0)
    # Sum over the extracted pairs (row-major) so the result is bit-identical
    # to the same loss computed on a manually filtered batch.
    d = diff[masks]
    loss = float((d * d).sum() / m)
    dpred = 2.0 * diff / m
    return loss, dpred


@dataclass
class AdamState:
    """Per-parameter moment accumulators for Adam with bias correction."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def adam_step(weights, grads, state: AdamState):
    """One in-place Adam update; returns (weights, state)."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient in block {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1 ** state.step
    bias2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / bias1) / (np.sqrt(v / bias2) + state.epsilon)
        weights[name] -= state.learning_rate * update
    return weights, state


@dataclass
class Model:
    """Trained weights plus the normalization that the inputs must match."""

    config: ModelConfig
    weights: dict
    norm: NormStats


def predict(model: Model, windows_raw, dense_raw) -> np.ndarray:
    """Concentrations in ug/m3 from raw (unnormalized) feature arrays."""
    dense = normalize_dense(np.atleast_2d(dense_raw), model.norm)
    windows = None
    if model.config.has_branch:
        windows = normalize_windows(windows_raw, model.norm)
    out, _ = forward(model.weights, model.config, windows, dense)
    result = np.maximum(np.expm1(out), 0.0)
    if not np.isfinite(result).all():
        raise NumericalError("prediction produced non-finite concentrations")
    return result


def predict_vector(model: Model, fv: FeatureVector) -> tuple[float, float]:
    windows = None if fv.windows is None else fv.windows[None, ...]
    out = predict(model, windows, fv.dense[None, :])
    return float(out[0, 0]), float(out[0, 1])


# -- gradient checking -------------------------------------------------------

# Finite differences are invalid within a kink's reach; inputs are redrawn
# until every ReLU pre-activation and pooling gap clears this margin.
KINK_MARGIN = 2e-3


def _pool_gaps_ok(a, pool, margin):
    n, t, f = a.shape
    t_out = t // pool
    xr = a[:, : t_out * pool, :].reshape(n, t_out, pool, f)
    if pool != 2:
        return True
    gap = np.abs(xr[:, :, 0, :] - xr[:, :, 1, :])
    both_dead = (xr <= 0).all(axis=2)
    return bool((both_dead | (gap > margin)).all())


def _draw_case(config: ModelConfig, rng, batch):
    windows = None
    if config.has_branch:
        windows = rng.normal(0.0, 1.0, (batch, config.n_sensors, config.window_len, config.n_channels))
    dense = rng.normal(0.0, 1.0, (batch, config.dense_in))
    targets = rng.uniform(0.0, 30.0, (batch, 2))
    masks = rng.random((batch, 2)) > 0.25
    if not masks.any():
        masks[0, 0] = True
    targets = np.where(masks, targets, np.nan)
    return windows, dense, targets, masks


def _margins_ok(config, cache, margin=KINK_MARGIN):
    if np.abs(cache["zh"]).min() <= margin:
        return False
    if config.has_branch:
        if np.abs(cache["z1"]).min() <= margin or np.abs(cache["z2"]).min() <= margin:
            return False
        a1 = np.maximum(cache["z1"], 0.0)
        a2 = np.maximum(cache["z2"], 0.0)
        if not _pool_gaps_ok(a1, config.pool_size, margin):
            return False
        if not _pool_gaps_ok(a2, config.pool_size, margin):
            return False
    return True


def gradient_check(config: ModelConfig, seed: int, batch: int = 3, step: float = 1e-4) -> float:
    """Max relative error between analytic gradients and central finite
    differences over every parameter, on a random batch kept clear of
    ReLU/pooling kinks (finite differences are meaningless at a kink)."""
    config.validate()
    rng = np.random.default_rng(seed)
    weights = init_weights(config, seed=seed)
    for attempt in range(200):
        windows, dense, targets, masks = _draw_case(config, rng, batch)
        out, cache = forward(weights, config, windows, dense)
        if _margins_ok(config, cache):
            break
    else:
        raise NumericalError("gradient_check: could not find a kink-free batch")
    loss, dpred = msle_loss(out, targets, masks)
    grads = backward(weights, config, cache, dpred)

    def loss_at() -> float:
        out2, _ = forward(weights, config, windows, dense)
        return msle_loss(out2, targets, masks)[0]

    worst = 0.0
    for name in sorted(grads):
        block = weights[name]
        flat = block.ravel()
        gflat = grads[name].ravel()
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            hi = loss_at()
            flat[i] = keep - step
            lo = loss_at()
            flat[i] = keep
            fd = (hi - lo) / (2.0 * step)
            err = abs(gflat[i] - fd) / max(abs(gflat[i]), abs(fd), 1e-6)
            worst = max(worst, err)
    return worst


def random_small_config(variant: str, rng) -> ModelConfig:
    """A small random architecture for gradient checking."""
    window_len = int(rng.integers(10, 17))
    return ModelConfig.for_variant(
        variant,
        seed=int(rng.integers(0, 2**31)),
        hidden_units=int(rng.integers(3, 8)),
        conv1_filters=int(rng.integers(2, 5)),
        conv2_filters=int(rng.integers(2, 4)),
        n_sensors=int(rng.integers(1, 4)) if variant != "station" else N_NEIGHBORS,
        window_len=window_len if variant != "station" else WINDOW_LEN,
        n_dense=int(rng.integers(3, 9)),
        n_flags=0,
    )


# -- persistence --------------------------------------------------------------

_CONFIG_FIELDS = (
    "hidden_units", "conv1_kernel", "conv1_filters", "conv2_kernel",
    "conv2_filters", "pool_size", "n_sensors", "window_len", "n_channels",
    "n_dense", "n_flags", "seed",
)


def save_model(model: Model, path):
    """Text header plus named little-endian float64 blocks; round-trips
    bit-exactly."""
    blocks: list[tuple[str, np.ndarray]] = [
        (name, model.weights[name]) for name in sorted(model.weights)
    ]
    blocks += [
        ("norm_dense_mean", model.norm.dense_mean),
        ("norm_dense_std", model.norm.dense_std),
        ("norm_window_mean", model.norm.window_mean),
        ("norm_window_std", model.norm.window_std),
    ]
    header = [f"{MODEL_MAGIC} {MODEL_VERSION}", f"variant {model.config.variant}"]
    header += [f"{name} {getattr(model.config, name)}" for name in _CONFIG_FIELDS]
    header.append(f"norm_digest {model.norm.digest()}")
    header.append(f"blocks {len(blocks)}")
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("utf-8"))
        for name, arr in blocks:
            dims = " ".join(str(d) for d in arr.shape)
            f.write(f"block {name} {dims}\n".encode("utf-8"))
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_model(path) -> Model:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read model {path}: {exc}") from exc
    marker = b"end_header\n"
    split_at = blob.find(marker)
    if split_at < 0 or not blob.startswith(MODEL_MAGIC.encode()):
        raise DataError(f"{path}: not an {MODEL_MAGIC} file")
    fields: dict[str, str] = {}
    for line in blob[:split_at].decode("utf-8").splitlines()[1:]:
        key, value = line.split(maxsplit=1)
        fields[key] = value
    config = ModelConfig(
        variant=fields["variant"],
        **{name: int(fields[name]) for name in _CONFIG_FIELDS},
    )
    n_blocks = int(fields["blocks"])
    pos = split_at + len(marker)
    weights: dict[str, np.ndarray] = {}
    norm_arrays: dict[str, np.ndarray] = {}
    for _ in range(n_blocks):
        eol = blob.index(b"\n", pos)
        parts = blob[pos:eol].decode("utf-8").split()
        if parts[0] != "block":
            raise DataError(f"{path}: corrupt block header {parts}")
        name = parts[1]
        shape = tuple(int(d) for d in parts[2:])
        count = int(np.prod(shape)) if shape else 1
        start = eol + 1
        arr = np.frombuffer(blob[start : start + 8 * count], dtype="<f8", count=count).reshape(shape).copy()
        pos = start + 8 * count
        if name.startswith("norm_"):
            norm_arrays[name[len("norm_") :]] = arr
        else:
            weights[name] = arr
    norm = NormStats(variant=config.variant, **norm_arrays)
    model = Model(config, weights, norm)
    if norm.digest() != fields["norm_digest"]:
        raise DataError(f"{path}: normalization digest mismatch")
    return model
