"""Core value types shared by training, aggregation, and the chain.

Everything here is an immutable record.  The binary encodings defined in
this module (parameter vectors and model updates) are the canonical
bit-exact formats used inside blocks and wire messages, so they must
never change silently.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("relu", "sigmoid")

CLIENT_ID_LEN = 20


class EncodingError(ValueError):
    """Raised when a binary payload cannot be decoded."""


@dataclass(frozen=True)
class ModelConfig:
    """MLP architecture: layer widths, hidden activation, init seed."""

    layer_sizes: tuple[int, ...]
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(w) for w in self.layer_sizes))
        if len(self.layer_sizes) < 2:
            raise ValueError("need at least an input and an output layer")
        if any(w < 1 for w in self.layer_sizes):
            raise ValueError("layer widths must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 bits")

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]


def param_count(config: ModelConfig) -> int:
    """Total number of weights and biases: sum of (fan_in+1)*fan_out."""
    sizes = config.layer_sizes
    return sum((sizes[i] + 1) * sizes[i + 1] for i in range(len(sizes) - 1))


@dataclass(frozen=True)
class ParameterVector:
    """Flat float64 view of all model weights, biases appended per layer."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.values, dtype=np.float64)
        if arr.ndim != 1:
            raise ValueError("parameter vector must be one-dimensional")
        if not np.all(np.isfinite(arr)):
            raise ValueError("parameter vector contains NaN or Inf")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParameterVector):
            return NotImplemented
        return self.values.shape == other.values.shape and bool(
            np.all(self.values == other.values)
        )

    def __hash__(self):
        return hash(self.values.tobytes())


def serialize_model_config(m: ModelConfig) -> bytes:
    """u16 layer count | u32 widths | u8 activation index | u64 seed. All LE."""
    out = struct.pack("<H", len(m.layer_sizes))
    out += struct.pack(f"<{len(m.layer_sizes)}I", *m.layer_sizes)
    out += struct.pack("<BQ", ACTIVATIONS.index(m.activation), m.seed)
    return out


def deserialize_model_config(data: bytes, offset: int = 0) -> tuple[ModelConfig, int]:
    if len(data) - offset < 2:
        raise EncodingError("model config truncated before layer count")
    (count,) = struct.unpack_from("<H", data, offset)
    offset += 2
    if len(data) - offset < 4 * count + 9:
        raise EncodingError("model config truncated")
    widths = struct.unpack_from(f"<{count}I", data, offset)
    offset += 4 * count
    act_index, seed = struct.unpack_from("<BQ", data, offset)
    offset += 9
    if act_index >= len(ACTIVATIONS):
        raise EncodingError(f"unknown activation index {act_index}")
    try:
        config = ModelConfig(widths, ACTIVATIONS[act_index], seed)
    except ValueError as exc:
        raise EncodingError(str(exc)) from None
    return config, offset


def serialize_params(p: ParameterVector) -> bytes:
    """u32-LE dim followed by dim little-endian IEEE-754 doubles."""
    return struct.pack("<I", p.dim) + p.values.astype("<f8").tobytes()


def deserialize_params(data: bytes, offset: int = 0) -> tuple[ParameterVector, int]:
    """Decode from `offset`; returns (vector, next_offset)."""
    if len(data) - offset < 4:
        raise EncodingError("parameter vector truncated before dim")
    (dim,) = struct.unpack_from("<I", data, offset)
    offset += 4
    end = offset + 8 * dim
    if len(data) < end:
        raise EncodingError("parameter vector truncated")
    values = np.frombuffer(data, dtype="<f8", count=dim, offset=offset)
    if not np.all(np.isfinite(values)):
        raise EncodingError("parameter vector contains NaN or Inf")
    return ParameterVector(values), end


@dataclass(frozen=True)
class ModelUpdate:
    """One client's contribution: locally trained weights plus its sample count."""

    client_id: bytes
    sample_count: int
    params: ParameterVector
    round: int

    def __post_init__(self):
        if len(self.client_id) != CLIENT_ID_LEN:
            raise ValueError("client_id must be exactly 20 bytes")
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")
        if not 0 <= self.round < 2**64:
            raise ValueError("round must fit in 64 bits")


def serialize_update(u: ModelUpdate) -> bytes:
    """client_id(20) | sample_count u64 | round u64 | params. All LE."""
    return (
        u.client_id
        + struct.pack("<QQ", u.sample_count, u.round)
        + serialize_params(u.params)
    )


def deserialize_update(data: bytes, offset: int = 0) -> tuple[ModelUpdate, int]:
    if len(data) - offset < CLIENT_ID_LEN + 16:
        raise EncodingError("model update truncated")
    client_id = bytes(data[offset : offset + CLIENT_ID_LEN])
    offset += CLIENT_ID_LEN
    sample_count, rnd = struct.unpack_from("<QQ", data, offset)
    offset += 16
    params, offset = deserialize_params(data, offset)
    if sample_count < 1:
        raise EncodingError("model update has zero sample_count")
    return ModelUpdate(client_id, sample_count, params, rnd), offset


@dataclass(frozen=True)
class Dataset:
    """Feature matrix plus integer class labels."""

    inputs: np.ndarray
    labels: np.ndarray
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        inputs = np.ascontiguousarray(self.inputs, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if inputs.ndim != 2:
            raise ValueError("inputs must be a 2-D matrix")
        if labels.ndim != 1 or labels.shape[0] != inputs.shape[0]:
            raise ValueError("labels length must match inputs row count")
        if labels.size and labels.min() < 0:
            raise ValueError("labels must be non-negative class indices")
        inputs.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    @property
    def n_samples(self) -> int:
        return self.inputs.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx])


def serialize_dataset(d: Dataset) -> bytes:
    """n u32 | dim u32 | inputs row-major f64 | labels u32. All LE."""
    return (
        struct.pack("<II", d.n_samples, d.input_dim)
        + d.inputs.astype("<f8").tobytes()
        + d.labels.astype("<u4").tobytes()
    )


def deserialize_dataset(data: bytes, offset: int = 0) -> tuple[Dataset, int]:
    if len(data) - offset < 8:
        raise EncodingError("dataset truncated before header")
    n, dim = struct.unpack_from("<II", data, offset)
    offset += 8
    need = 8 * n * dim + 4 * n
    if len(data) - offset < need:
        raise EncodingError("dataset truncated")
    inputs = np.frombuffer(data, dtype="<f8", count=n * dim, offset=offset)
    offset += 8 * n * dim
    labels = np.frombuffer(data, dtype="<u4", count=n, offset=offset)
    offset += 4 * n
    return Dataset(inputs.reshape(n, dim), labels.astype(np.int64)), offset
