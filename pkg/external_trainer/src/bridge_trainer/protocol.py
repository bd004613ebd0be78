"""Bridge wire format: u32 length-prefixed frames over a loopback stream.

All integers and floats are little-endian, matching the node's block
encodings. Implemented from the documented layout, not imported from the
node package, so the format itself is what both sides must agree on.

Request body:  kind=1 | job_id(16) | client_id(20) | u64 round
               | model: u16 layer count, u32 widths, u8 activation, u64 seed
               | params: u32 dim, f64 values
               | train spec: u32 epochs, u32 batch, f64 lr, u64 seed
               | data_ref: u16 length, utf-8 bytes
Response body: kind=2 | job_id(16) | status(1)
               ok:    client_id(20) | u64 sample_count | u64 round | params
               error: u16 length, utf-8 message
"""

import math
import socket
import struct
import time
from dataclasses import dataclass

import numpy as np

ACTIVATIONS = ("relu", "sigmoid")
JOB_ID_LEN = 16
CLIENT_ID_LEN = 20

KIND_REQUEST = 1
KIND_RESPONSE = 2
STATUS_OK = 0
STATUS_ERROR = 1

MAX_FRAME = 64 * 1024 * 1024


class ProtocolError(ValueError):
    """Bytes that do not parse as a bridge message."""


@dataclass(frozen=True)
class ModelSpec:
    layer_sizes: tuple
    activation: str
    seed: int


@dataclass(frozen=True)
class TrainSpec:
    epochs: int
    batch_size: int
    learning_rate: float
    seed: int


@dataclass(frozen=True)
class TrainRequest:
    job_id: bytes
    client_id: bytes
    round: int
    model: ModelSpec
    start_params: np.ndarray
    spec: TrainSpec
    data_ref: str


def _need(data: bytes, offset: int, count: int, what: str):
    if len(data) - offset < count:
        raise ProtocolError(f"{what} truncated")


def _unpack_str(data: bytes, offset: int) -> tuple[str, int]:
    _need(data, offset, 2, "string length")
    (length,) = struct.unpack_from("<H", data, offset)
    _need(data, offset + 2, length, "string body")
    return data[offset + 2 : offset + 2 + length].decode("utf-8"), offset + 2 + length


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError("string too long for u16 length prefix")
    return struct.pack("<H", len(raw)) + raw


def decode_request(body: bytes) -> TrainRequest:
    if not body or body[0] != KIND_REQUEST:
        raise ProtocolError("not a bridge request")
    offset = 1
    _need(body, offset, JOB_ID_LEN + CLIENT_ID_LEN + 8, "request head")
    job_id = bytes(body[offset : offset + JOB_ID_LEN])
    offset += JOB_ID_LEN
    client_id = bytes(body[offset : offset + CLIENT_ID_LEN])
    offset += CLIENT_ID_LEN
    (round_,) = struct.unpack_from("<Q", body, offset)
    offset += 8

    _need(body, offset, 2, "layer count")
    (n_layers,) = struct.unpack_from("<H", body, offset)
    offset += 2
    if n_layers < 2:
        raise ProtocolError("model needs at least input and output layers")
    _need(body, offset, 4 * n_layers + 9, "model config")
    sizes = struct.unpack_from(f"<{n_layers}I", body, offset)
    offset += 4 * n_layers
    act_index, model_seed = struct.unpack_from("<BQ", body, offset)
    offset += 9
    if act_index >= len(ACTIVATIONS):
        raise ProtocolError(f"unknown activation index {act_index}")
    model = ModelSpec(tuple(sizes), ACTIVATIONS[act_index], model_seed)

    _need(body, offset, 4, "parameter dim")
    (dim,) = struct.unpack_from("<I", body, offset)
    offset += 4
    _need(body, offset, 8 * dim, "parameter values")
    params = np.frombuffer(body, dtype="<f8", count=dim, offset=offset).copy()
    offset += 8 * dim
    if not np.all(np.isfinite(params)):
        raise ProtocolError("start parameters contain NaN or Inf")

    _need(body, offset, 24, "train spec")
    epochs, batch, lr, seed = struct.unpack_from("<IIdQ", body, offset)
    offset += 24
    if epochs < 1 or batch < 1 or not (math.isfinite(lr) and lr >= 0):
        raise ProtocolError("train spec out of range")
    spec = TrainSpec(epochs, batch, lr, seed)

    data_ref, offset = _unpack_str(body, offset)
    if offset != len(body):
        raise ProtocolError("trailing bytes in bridge request")
    return TrainRequest(job_id, client_id, round_, model, params, spec, data_ref)


def encode_ok_response(
    job_id: bytes, client_id: bytes, round_: int, sample_count: int, params: np.ndarray
) -> bytes:
    values = np.ascontiguousarray(params, dtype="<f8")
    return (
        bytes([KIND_RESPONSE])
        + job_id
        + bytes([STATUS_OK])
        + client_id
        + struct.pack("<QQ", sample_count, round_)
        + struct.pack("<I", values.shape[0])
        + values.tobytes()
    )


def encode_error_response(job_id: bytes, message: str) -> bytes:
    return bytes([KIND_RESPONSE]) + job_id + bytes([STATUS_ERROR]) + _pack_str(message)


def peek_job_id(body: bytes) -> bytes:
    """Best-effort job id from a possibly malformed request."""
    if len(body) >= 1 + JOB_ID_LEN and body[0] == KIND_REQUEST:
        return bytes(body[1 : 1 + JOB_ID_LEN])
    return bytes(JOB_ID_LEN)


# --- framing -----------------------------------------------------------------


def send_frame(sock: socket.socket, body: bytes):
    sock.sendall(struct.pack("<I", len(body)) + body)


def _recv_exact(sock: socket.socket, n: int, deadline) -> bytes | None:
    chunks = []
    got = 0
    while got < n:
        if deadline is not None:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                return None
            sock.settimeout(remaining)
        try:
            piece = sock.recv(n - got)
        except socket.timeout:
            return None
        if not piece:
            raise ConnectionError("bridge connection closed")
        chunks.append(piece)
        got += len(piece)
    return b"".join(chunks)


def recv_frame(sock: socket.socket, timeout=None) -> bytes | None:
    """One frame, or None on timeout. Raises ConnectionError on EOF."""
    deadline = None if timeout is None else time.monotonic() + timeout
    head = _recv_exact(sock, 4, deadline)
    if head is None:
        return None
    (length,) = struct.unpack("<I", head)
    if length > MAX_FRAME:
        raise ProtocolError(f"bridge frame of {length} bytes is implausible")
    return _recv_exact(sock, length, deadline)
