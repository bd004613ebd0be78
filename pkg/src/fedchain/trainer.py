"""Local training engine: MLP forward/backward, minibatch SGD, evaluation.

Parameter layout is layer-major: for each consecutive layer pair the
weight matrix (fan_in x fan_out, row-major) is flattened first, then the
bias vector.  Every routine is a pure function of its inputs, so two
nodes given the same seed produce bit-identical updates.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

from .params import (
    CLIENT_ID_LEN,
    Dataset,
    EncodingError,
    ModelConfig,
    ModelUpdate,
    ParameterVector,
    param_count,
)

NULL_CLIENT_ID = bytes(CLIENT_ID_LEN)


@dataclass(frozen=True)
class TrainSpec:
    """Knobs for one local training pass."""

    epochs: int
    batch_size: int
    learning_rate: float
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (np.isfinite(self.learning_rate) and self.learning_rate >= 0):
            raise ValueError("learning_rate must be finite and >= 0")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 bits")


def serialize_train_spec(s: TrainSpec) -> bytes:
    """u32 epochs | u32 batch_size | f64 learning rate | u64 seed. All LE."""
    return struct.pack("<IIdQ", s.epochs, s.batch_size, s.learning_rate, s.seed)


def deserialize_train_spec(data: bytes, offset: int = 0) -> tuple[TrainSpec, int]:
    if len(data) - offset < 24:
        raise EncodingError("train spec truncated")
    epochs, batch, lr, seed = struct.unpack_from("<IIdQ", data, offset)
    try:
        spec = TrainSpec(epochs, batch, lr, seed)
    except ValueError as exc:
        raise EncodingError(str(exc)) from None
    return spec, offset + 24


def split_layers(config: ModelConfig, p: ParameterVector):
    """View the flat vector as a list of (W, b) per layer pair."""
    if p.dim != param_count(config):
        raise ValueError(
            f"parameter vector has dim {p.dim}, model needs {param_count(config)}"
        )
    sizes = config.layer_sizes
    layers = []
    off = 0
    for i in range(len(sizes) - 1):
        n_in, n_out = sizes[i], sizes[i + 1]
        w = p.values[off : off + n_in * n_out].reshape(n_in, n_out)
        off += n_in * n_out
        b = p.values[off : off + n_out]
        off += n_out
        layers.append((w, b))
    return layers


def flatten_layers(layers) -> ParameterVector:
    parts = []
    for w, b in layers:
        parts.append(np.asarray(w, dtype=np.float64).reshape(-1))
        parts.append(np.asarray(b, dtype=np.float64).reshape(-1))
    return ParameterVector(np.concatenate(parts))


def init_params(config: ModelConfig) -> ParameterVector:
    """Xavier-uniform weights, zero biases, fully determined by config.seed."""
    rng = np.random.default_rng(config.seed)
    sizes = config.layer_sizes
    layers = []
    for i in range(len(sizes) - 1):
        n_in, n_out = sizes[i], sizes[i + 1]
        limit = np.sqrt(6.0 / (n_in + n_out))
        w = rng.uniform(-limit, limit, size=(n_in, n_out))
        layers.append((w, np.zeros(n_out)))
    return flatten_layers(layers)


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0.0)
    # sigmoid, clipped against overflow in exp
    return 1.0 / (1.0 + np.exp(-np.clip(z, -500.0, 500.0)))


def _forward_batch(config: ModelConfig, layers, x: np.ndarray):
    """Returns (activations per layer incl. input, pre-activations, logits)."""
    acts = [x]
    zs = []
    h = x
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        z = h @ w + b
        zs.append(z)
        h = z if i == last else _activate(z, config.activation)
        acts.append(h)
    return acts, zs, acts[-1]


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def forward(config: ModelConfig, p: ParameterVector, x) -> np.ndarray:
    """Class probability vector for a single input row."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != config.input_dim:
        raise ValueError(f"input must have dim {config.input_dim}")
    layers = split_layers(config, p)
    _, _, logits = _forward_batch(config, layers, x[None, :])
    return _softmax(logits)[0]


def predict(config: ModelConfig, p: ParameterVector, data: Dataset) -> np.ndarray:
    """Argmax class index per dataset row."""
    _check_data(config, data)
    layers = split_layers(config, p)
    _, _, logits = _forward_batch(config, layers, data.inputs)
    return np.argmax(logits, axis=1)


def _check_data(config: ModelConfig, data: Dataset):
    if data.input_dim != config.input_dim:
        raise ValueError(
            f"dataset has {data.input_dim} features, model expects {config.input_dim}"
        )
    if data.n_samples and int(data.labels.max()) >= config.output_dim:
        raise ValueError("label out of range for model output width")


def loss(config: ModelConfig, p: ParameterVector, data: Dataset) -> float:
    """Mean cross-entropy over the dataset."""
    _check_data(config, data)
    if data.n_samples == 0:
        raise ValueError("loss undefined on empty dataset")
    layers = split_layers(config, p)
    _, _, logits = _forward_batch(config, layers, data.inputs)
    logp = _log_softmax(logits)
    return float(-logp[np.arange(data.n_samples), data.labels].mean())


def gradient(config: ModelConfig, p: ParameterVector, batch: Dataset) -> ParameterVector:
    """Analytic gradient of the mean cross-entropy over the batch."""
    _check_data(config, batch)
    n = batch.n_samples
    if n == 0:
        raise ValueError("gradient undefined on empty batch")
    layers = split_layers(config, p)
    acts, zs, logits = _forward_batch(config, layers, batch.inputs)

    probs = _softmax(logits)
    delta = probs
    delta[np.arange(n), batch.labels] -= 1.0
    delta /= n

    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        grads[i] = (acts[i].T @ delta, delta.sum(axis=0))
        if i > 0:
            delta = delta @ w.T
            if config.activation == "relu":
                delta = delta * (zs[i - 1] > 0)
            else:
                a = acts[i]
                delta = delta * a * (1.0 - a)
    return flatten_layers(grads)


def epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    """Deterministic per-epoch shuffle, keyed by (seed, epoch)."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def train_local(
    config: ModelConfig,
    start: ParameterVector,
    data: Dataset,
    spec: TrainSpec,
    client_id: bytes = NULL_CLIENT_ID,
    round: int = 0,
) -> ModelUpdate:
    """Minibatch SGD for spec.epochs passes; returns the update record."""
    _check_data(config, data)
    n = data.n_samples
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    if spec.batch_size > n:
        raise ValueError("batch_size exceeds dataset size")

    p = start
    for epoch in range(spec.epochs):
        perm = epoch_permutation(spec.seed, epoch, n)
        for lo in range(0, n, spec.batch_size):
            batch = data.subset(perm[lo : lo + spec.batch_size])
            g = gradient(config, p, batch)
            p = ParameterVector(p.values - spec.learning_rate * g.values)
    return ModelUpdate(client_id, n, p, round)


def evaluate(config: ModelConfig, p: ParameterVector, data: Dataset) -> float:
    """Fraction of rows whose argmax class matches the label."""
    if data.n_samples == 0:
        raise ValueError("accuracy undefined on empty dataset")
    return float(np.mean(predict(config, p, data) == data.labels))


# --- dataset loading ---------------------------------------------------------


def synthetic_blobs(
    n_samples: int,
    n_features: int,
    n_classes: int,
    seed: int,
    center_spread: float = 2.0,
    cluster_std: float = 1.0,
    centers_per_class: int = 1,
) -> Dataset:
    """Gaussian blobs, balanced classes, deterministically shuffled.

    centers_per_class > 1 scatters each class over several blobs, which
    raises the sample count needed to learn the class regions.
    """
    rng = np.random.default_rng(seed)
    labels = np.arange(n_samples, dtype=np.int64) % n_classes
    if centers_per_class == 1:
        centers = rng.normal(0.0, center_spread, size=(n_classes, n_features))
        means = centers[labels]
    else:
        centers = rng.normal(
            0.0, center_spread, size=(n_classes, centers_per_class, n_features)
        )
        which = rng.integers(0, centers_per_class, size=n_samples)
        means = centers[labels, which]
    inputs = means + rng.normal(0.0, cluster_std, size=(n_samples, n_features))
    order = rng.permutation(n_samples)
    return Dataset(inputs[order], labels[order])


def load_csv(path) -> Dataset:
    """Header row, float feature columns, final integer label column."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty CSV")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise ValueError(f"{path}: no data rows")
    arr = np.asarray(rows, dtype=np.float64)
    if arr.shape[1] < 2:
        raise ValueError(f"{path}: need at least one feature and a label column")
    labels = arr[:, -1]
    if not np.all(labels == np.round(labels)):
        raise ValueError(f"{path}: label column must be integral")
    return Dataset(arr[:, :-1], labels.astype(np.int64))


def save_csv(data: Dataset, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{i}" for i in range(data.input_dim)] + ["label"])
        for x, y in zip(data.inputs, data.labels):
            writer.writerow([repr(float(v)) for v in x] + [int(y)])
