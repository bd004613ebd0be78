"""Loopback bridge letting an external process serve as a node's trainer.

The node listens on a loopback TCP port; an external trainer connects and
then answers training requests. Frames are a u32 length followed by the
body; integers and floats use the same little-endian encodings as blocks.
Every reply passes validation gates before use, so a broken or hostile
external trainer can at worst force a fallback to the built-in trainer.
"""

from __future__ import annotations

import logging
import socket
import struct
import time
from dataclasses import dataclass

from .params import (
    EncodingError,
    ModelConfig,
    ModelUpdate,
    ParameterVector,
    deserialize_model_config,
    deserialize_params,
    deserialize_update,
    serialize_model_config,
    serialize_params,
    serialize_update,
)
from .trainer import TrainSpec, deserialize_train_spec, serialize_train_spec

log = logging.getLogger("fedchain.bridge")

DEFAULT_BRIDGE_PORT = 9400
TIMEOUT_PER_EPOCH = 10.0
JOB_ID_LEN = 16

KIND_REQUEST = 1
KIND_RESPONSE = 2
STATUS_OK = 0
STATUS_ERROR = 1

LOOPBACK_HOSTS = ("127.0.0.1", "::1", "localhost")


@dataclass(frozen=True)
class BridgeRequest:
    job_id: bytes
    client_id: bytes
    round: int
    model: ModelConfig
    start_params: ParameterVector
    spec: TrainSpec
    data_ref: str  # local path; the dataset itself never crosses the bridge

    def __post_init__(self):
        if len(self.job_id) != JOB_ID_LEN:
            raise ValueError("job_id must be 16 bytes")


@dataclass(frozen=True)
class BridgeResponse:
    job_id: bytes
    status: int
    update: ModelUpdate | None = None
    message: str = ""


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError("string too long for u16 length prefix")
    return struct.pack("<H", len(raw)) + raw


def _unpack_str(data: bytes, offset: int) -> tuple[str, int]:
    if len(data) - offset < 2:
        raise EncodingError("string length prefix truncated")
    (length,) = struct.unpack_from("<H", data, offset)
    end = offset + 2 + length
    if len(data) < end:
        raise EncodingError("string body truncated")
    return data[offset + 2 : end].decode("utf-8"), end


def encode_request(r: BridgeRequest) -> bytes:
    return (
        bytes([KIND_REQUEST])
        + r.job_id
        + r.client_id
        + struct.pack("<Q", r.round)
        + serialize_model_config(r.model)
        + serialize_params(r.start_params)
        + serialize_train_spec(r.spec)
        + _pack_str(r.data_ref)
    )


def decode_request(body: bytes) -> BridgeRequest:
    if len(body) < 1 + JOB_ID_LEN + 20 + 8 or body[0] != KIND_REQUEST:
        raise EncodingError("not a bridge request")
    offset = 1
    job_id = bytes(body[offset : offset + JOB_ID_LEN])
    offset += JOB_ID_LEN
    client_id = bytes(body[offset : offset + 20])
    offset += 20
    (rnd,) = struct.unpack_from("<Q", body, offset)
    offset += 8
    model, offset = deserialize_model_config(body, offset)
    params, offset = deserialize_params(body, offset)
    spec, offset = deserialize_train_spec(body, offset)
    data_ref, offset = _unpack_str(body, offset)
    if offset != len(body):
        raise EncodingError("trailing bytes in bridge request")
    return BridgeRequest(job_id, client_id, rnd, model, params, spec, data_ref)


def encode_response(r: BridgeResponse) -> bytes:
    head = bytes([KIND_RESPONSE]) + r.job_id + bytes([r.status])
    if r.status == STATUS_OK:
        if r.update is None:
            raise ValueError("ok response requires an update")
        return head + serialize_update(r.update)
    return head + _pack_str(r.message)


def decode_response(body: bytes) -> BridgeResponse:
    if len(body) < 1 + JOB_ID_LEN + 1 or body[0] != KIND_RESPONSE:
        raise EncodingError("not a bridge response")
    job_id = bytes(body[1 : 1 + JOB_ID_LEN])
    status = body[1 + JOB_ID_LEN]
    offset = 1 + JOB_ID_LEN + 1
    if status == STATUS_OK:
        update, offset = deserialize_update(body, offset)
        if offset != len(body):
            raise EncodingError("trailing bytes in bridge response")
        return BridgeResponse(job_id, status, update=update)
    if status == STATUS_ERROR:
        message, offset = _unpack_str(body, offset)
        if offset != len(body):
            raise EncodingError("trailing bytes in bridge response")
        return BridgeResponse(job_id, status, message=message)
    raise EncodingError(f"unknown bridge status {status}")


# --- stream framing ----------------------------------------------------------


def send_frame(sock: socket.socket, body: bytes):
    sock.sendall(struct.pack("<I", len(body)) + body)


def _recv_exact(sock: socket.socket, n: int, deadline: float) -> bytes | None:
    chunks = []
    got = 0
    while got < n:
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


def recv_frame(sock: socket.socket, timeout: float) -> bytes | None:
    """One length-prefixed frame, or None on timeout."""
    deadline = time.monotonic() + timeout
    head = _recv_exact(sock, 4, deadline)
    if head is None:
        return None
    (length,) = struct.unpack("<I", head)
    if length > 64 * 1024 * 1024:
        raise EncodingError(f"bridge frame of {length} bytes is implausible")
    body = _recv_exact(sock, length, deadline)
    if body is None:
        return None
    return body


# --- node-side listener ------------------------------------------------------


class BridgeListener:
    """Accepts one external trainer on loopback and delegates jobs to it."""

    def __init__(self, host: str = "127.0.0.1", port: int = DEFAULT_BRIDGE_PORT):
        if host not in LOOPBACK_HOSTS:
            raise ValueError("bridge must bind a loopback address")
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen(1)
        self._listener.settimeout(0.0)
        self.port = self._listener.getsockname()[1]
        self._conn: socket.socket | None = None

    def poll_accept(self):
        try:
            conn, addr = self._listener.accept()
        except (BlockingIOError, socket.timeout):
            return
        if self._conn is not None:
            self._conn.close()
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._conn = conn
        log.info("external trainer connected from %s:%s", *addr[:2])

    @property
    def connected(self) -> bool:
        return self._conn is not None

    def _drop_connection(self):
        if self._conn is not None:
            self._conn.close()
            self._conn = None

    def request_train(self, request: BridgeRequest, dataset_size: int) -> ModelUpdate | None:
        """Delegate one job; None means the caller must train locally.

        The reply must echo job_id, client_id, and round, carry the right
        dimension (finiteness is enforced by decoding), and claim exactly
        the dataset's sample count.
        """
        self.poll_accept()
        if self._conn is None:
            return None
        timeout = TIMEOUT_PER_EPOCH * request.spec.epochs
        try:
            send_frame(self._conn, encode_request(request))
            deadline = time.monotonic() + timeout
            while True:
                body = recv_frame(self._conn, max(deadline - time.monotonic(), 0.0))
                if body is None:
                    log.warning("bridge timeout after %.1f s; training locally", timeout)
                    self._drop_connection()
                    return None
                response = decode_response(body)
                if response.job_id != request.job_id:
                    log.warning("bridge reply for stale job %s ignored", response.job_id.hex())
                    continue
                break
        except (OSError, EncodingError) as exc:
            log.warning("bridge failure (%s); training locally", exc)
            self._drop_connection()
            return None
        if response.status != STATUS_OK:
            log.warning("bridge error reply: %s", response.message)
            return None
        update = response.update
        if update.params.dim != request.start_params.dim:
            log.warning("bridge update has wrong dimension; rejected")
            return None
        if update.sample_count != dataset_size:
            log.warning(
                "bridge update claims %d samples, dataset has %d; rejected",
                update.sample_count,
                dataset_size,
            )
            return None
        if update.client_id != request.client_id or update.round != request.round:
            log.warning("bridge update does not echo its job; rejected")
            return None
        return update

    def close(self):
        self._drop_connection()
        self._listener.close()
