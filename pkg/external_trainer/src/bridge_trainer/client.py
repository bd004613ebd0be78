"""Connect to a node's bridge port and answer training requests.

One request at a time; any per-request failure turns into an error
response so the process never dies on bad input. Lost connections are
retried with exponential backoff.
"""

import logging
import socket
import time

from . import model
from .protocol import (
    ProtocolError,
    decode_request,
    encode_error_response,
    encode_ok_response,
    peek_job_id,
    recv_frame,
    send_frame,
)

log = logging.getLogger("bridge_trainer")

LOOPBACK_HOSTS = ("127.0.0.1", "::1", "localhost")
BACKOFF_START = 0.5
BACKOFF_MAX = 8.0
POLL_SECONDS = 1.0


def parse_endpoint(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not host:
        raise ValueError(f"endpoint {text!r} must be host:port")
    if host not in LOOPBACK_HOSTS:
        raise ValueError("bridge endpoints are loopback only")
    return host, int(port)


def backoff_delays():
    delay = BACKOFF_START
    while True:
        yield delay
        delay = min(delay * 2, BACKOFF_MAX)


def handle_request_bytes(body: bytes) -> bytes:
    """One request in, one response out; never raises on bad input."""
    try:
        request = decode_request(body)
    except ProtocolError as exc:
        log.warning("malformed request: %s", exc)
        return encode_error_response(peek_job_id(body), f"malformed request: {exc}")
    try:
        if not request.data_ref:
            raise ValueError("request carries no dataset reference")
        inputs, labels = model.load_csv(request.data_ref)
        trained = model.train(request.model, request.start_params, inputs, labels, request.spec)
        log.info(
            "job %s: trained %d epochs on %d samples",
            request.job_id.hex()[:8],
            request.spec.epochs,
            inputs.shape[0],
        )
        return encode_ok_response(
            request.job_id, request.client_id, request.round, inputs.shape[0], trained
        )
    except (OSError, ValueError) as exc:
        log.warning("job %s failed: %s", request.job_id.hex()[:8], exc)
        return encode_error_response(request.job_id, str(exc))


def serve_connection(sock: socket.socket, should_stop=None):
    """Answer requests until EOF, a framing desync, or should_stop()."""
    while should_stop is None or not should_stop():
        try:
            body = recv_frame(sock, timeout=POLL_SECONDS)
        except ProtocolError as exc:
            # an oversized length prefix desyncs the stream beyond repair;
            # drop the connection and let the caller redial
            raise ConnectionError(f"framing desync: {exc}") from None
        if body is None:
            continue
        send_frame(sock, handle_request_bytes(body))


def run(endpoint: str, should_stop=None) -> int:
    host, port = parse_endpoint(endpoint)
    delays = backoff_delays()
    while should_stop is None or not should_stop():
        try:
            with socket.create_connection((host, port), timeout=5.0) as sock:
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                log.info("connected to %s:%d", host, port)
                delays = backoff_delays()
                serve_connection(sock, should_stop)
                return 0
        except (ConnectionError, OSError) as exc:
            delay = next(delays)
            log.info("connection to %s:%d failed (%s); retrying in %.1fs", host, port, exc, delay)
            time.sleep(delay)
    return 0
