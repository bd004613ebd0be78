"""Two-channel peer messaging: a sync channel for chain bootstrap and a
broadcast channel for gossip, over pluggable datagram transports.

The wire format is a fixed 11-byte header (magic, version, kind, payload
length) followed by the payload and a 4-byte checksum. Chain snapshots that
exceed the datagram budget are chunked; everything else fits one datagram.
"""

from __future__ import annotations

import logging
import random
import socket
import struct
import time
from collections import OrderedDict, deque
from dataclasses import dataclass, field
from enum import IntEnum

from .chain import Block, Chain, double_sha256, serialize_block, validate_chain
from .params import EncodingError

log = logging.getLogger("fedchain.net")

MAGIC = b"\x46\x43\x48\x4e"
WIRE_VERSION = 1
FRAME_OVERHEAD = 4 + 2 + 1 + 4 + 4  # magic, version, kind, length, checksum
MAX_DATAGRAM = 65_000
CHUNK_PAYLOAD = 60_000
DEDUP_CACHE = 4096
PEER_EXPIRY = 600.0
DEFAULT_SYNC_PORT = 9333
DEFAULT_BROADCAST_PORT = 9334
RETRY_WAITS = (0.5, 1.0, 2.0)


class MessageKind(IntEnum):
    GET_CHAIN = 1
    CHAIN_SNAPSHOT = 2
    GET_PEERS = 3
    PEER_LIST = 4
    ANNOUNCE = 5
    UPDATE_GOSSIP = 6
    BLOCK_GOSSIP = 7
    OFFLOAD_JOB = 8
    OFFLOAD_RESULT = 9


class DecodeError(Exception):
    """A datagram that cannot be parsed into a WireMessage."""


class ShortBufferError(DecodeError):
    pass


class BadMagicError(DecodeError):
    pass


class ChecksumError(DecodeError):
    pass


class UnknownKindError(DecodeError):
    """Structurally valid frame with an unrecognized kind byte.

    Receive loops treat this as ignorable rather than fatal so that newer
    protocol revisions can coexist with older nodes.
    """

    def __init__(self, kind: int):
        super().__init__(f"unknown message kind {kind}")
        self.kind = kind


@dataclass(frozen=True)
class WireMessage:
    kind: int
    payload: bytes
    version: int = WIRE_VERSION


def encode_message(m: WireMessage) -> bytes:
    if not 0 <= m.kind <= 0xFF:
        raise ValueError("kind must fit one byte")
    total = FRAME_OVERHEAD + len(m.payload)
    if total > MAX_DATAGRAM:
        raise ValueError(f"datagram of {total} bytes exceeds {MAX_DATAGRAM}")
    head = MAGIC + struct.pack("<HBI", m.version, m.kind, len(m.payload))
    return head + m.payload + double_sha256(m.payload)[:4]


def decode_message(data: bytes) -> WireMessage:
    if len(data) < FRAME_OVERHEAD:
        raise ShortBufferError(f"{len(data)} bytes is below the frame minimum")
    if data[:4] != MAGIC:
        raise BadMagicError(data[:4].hex())
    version, kind, length = struct.unpack_from("<HBI", data, 4)
    if len(data) < FRAME_OVERHEAD + length:
        raise ShortBufferError("payload truncated")
    if len(data) != FRAME_OVERHEAD + length:
        raise DecodeError("trailing bytes after checksum")
    payload = bytes(data[11 : 11 + length])
    if data[11 + length :] != double_sha256(payload)[:4]:
        raise ChecksumError("payload checksum mismatch")
    try:
        kind = MessageKind(kind)
    except ValueError:
        raise UnknownKindError(kind) from None
    return WireMessage(kind, payload, version)


# --- payload codecs ----------------------------------------------------------


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
    return data[offset + 2 : end].decode("utf-8", errors="strict"), end


def encode_announce(endpoint: str) -> bytes:
    return _pack_str(endpoint)


def decode_announce(payload: bytes) -> str:
    endpoint, end = _unpack_str(payload, 0)
    if end != len(payload):
        raise EncodingError("trailing bytes in announce")
    parse_endpoint(endpoint)
    return endpoint


def encode_peer_list(endpoints: list[str]) -> bytes:
    # last_seen stays local: clocks differ across hosts, receivers restamp
    out = struct.pack("<H", len(endpoints))
    for ep in endpoints:
        out += _pack_str(ep)
    return out


def decode_peer_list(payload: bytes) -> list[str]:
    if len(payload) < 2:
        raise EncodingError("peer list header truncated")
    (count,) = struct.unpack_from("<H", payload, 0)
    endpoints = []
    offset = 2
    for _ in range(count):
        ep, offset = _unpack_str(payload, offset)
        endpoints.append(ep)
    if offset != len(payload):
        raise EncodingError("trailing bytes in peer list")
    return endpoints


def encode_chunk(index: int, count: int, data: bytes) -> bytes:
    return struct.pack("<II", index, count) + data


def decode_chunk(payload: bytes) -> tuple[int, int, bytes]:
    if len(payload) < 8:
        raise EncodingError("chunk header truncated")
    index, count = struct.unpack_from("<II", payload, 0)
    if count == 0 or index >= count:
        raise EncodingError(f"chunk index {index} outside count {count}")
    return index, count, bytes(payload[8:])


def chunk_snapshot(data: bytes) -> list[bytes]:
    """Split a serialized chain into ChainSnapshot payloads."""
    pieces = [data[i : i + CHUNK_PAYLOAD] for i in range(0, len(data), CHUNK_PAYLOAD)] or [b""]
    return [encode_chunk(i, len(pieces), piece) for i, piece in enumerate(pieces)]


class SnapshotAssembler:
    """Reassembles chunked chain snapshots, tolerating any arrival order."""

    def __init__(self):
        self.count = None
        self.parts: dict[int, bytes] = {}

    def add(self, payload: bytes) -> bytes | None:
        index, count, data = decode_chunk(payload)
        if self.count is None:
            self.count = count
        elif count != self.count:
            # a different snapshot started; begin again from this chunk
            self.count = count
            self.parts.clear()
        self.parts[index] = data
        if len(self.parts) == self.count:
            return b"".join(self.parts[i] for i in range(self.count))
        return None


def serialize_chain(chain: Chain) -> bytes:
    out = bytearray()
    for block in chain.blocks:
        raw = serialize_block(block)
        out += struct.pack("<I", len(raw))
        out += raw
    return bytes(out)


def deserialize_chain(data: bytes) -> Chain:
    from .chain import deserialize_block

    blocks = []
    offset = 0
    while offset < len(data):
        if len(data) - offset < 4:
            raise EncodingError("chain record length truncated")
        (length,) = struct.unpack_from("<I", data, offset)
        offset += 4
        if len(data) - offset < length:
            raise EncodingError("chain record body truncated")
        block, consumed = deserialize_block(data[offset : offset + length], len(blocks))
        if consumed != length:
            raise EncodingError("chain record has trailing bytes")
        blocks.append(block)
        offset += length
    return Chain(blocks)


# --- peer membership ---------------------------------------------------------


def parse_endpoint(endpoint: str) -> tuple[str, int]:
    host, sep, port = endpoint.rpartition(":")
    if not sep or not host:
        raise ValueError(f"endpoint {endpoint!r} is not host:port")
    port_num = int(port)
    if not 0 < port_num < 65536:
        raise ValueError(f"port {port_num} out of range")
    return host, port_num


@dataclass
class PeerRecord:
    endpoint: str
    last_seen: float


class PeerTable:
    """Known peers with last-traffic stamps; silent peers expire."""

    def __init__(self, expiry: float = PEER_EXPIRY):
        self.expiry = expiry
        self._records: dict[str, float] = {}

    def touch(self, endpoint: str, now: float):
        parse_endpoint(endpoint)
        prev = self._records.get(endpoint)
        self._records[endpoint] = now if prev is None else max(prev, now)

    def remove(self, endpoint: str):
        self._records.pop(endpoint, None)

    def active(self, now: float) -> list[str]:
        return sorted(ep for ep, seen in self._records.items() if now - seen < self.expiry)

    def records(self) -> list[PeerRecord]:
        return [PeerRecord(ep, seen) for ep, seen in sorted(self._records.items())]

    def __contains__(self, endpoint: str) -> bool:
        return endpoint in self._records

    def __len__(self):
        return len(self._records)


# --- gossip ------------------------------------------------------------------


class GossipState:
    """Remembers recently relayed payload hashes to break broadcast loops."""

    def __init__(self, capacity: int = DEDUP_CACHE):
        self.capacity = capacity
        self._seen: OrderedDict[bytes, None] = OrderedDict()

    def check_and_mark(self, digest: bytes) -> bool:
        """True if digest is new (and now marked); False if already seen."""
        if digest in self._seen:
            self._seen.move_to_end(digest)
            return False
        self._seen[digest] = None
        while len(self._seen) > self.capacity:
            self._seen.popitem(last=False)
        return True

    def __contains__(self, digest: bytes) -> bool:
        return digest in self._seen


def gossip(transport, kind: int, payload: bytes, peers, state: GossipState | None = None) -> int:
    """Fire-and-forget broadcast; returns attempted sends (losses included)."""
    if state is not None and not state.check_and_mark(double_sha256(payload)):
        return 0
    frame = encode_message(WireMessage(kind, payload))
    attempts = 0
    for peer in peers:
        attempts += 1
        try:
            transport.send(peer, frame)
        except OSError as exc:
            log.info("gossip send to %s failed: %s", peer, exc)
    return attempts


# --- transports --------------------------------------------------------------


class UdpTransport:
    """One channel bound to a UDP port; endpoints are host:port strings."""

    def __init__(self, host: str = "0.0.0.0", port: int = 0):
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind((host, port))
        self.port = self.sock.getsockname()[1]

    def send(self, endpoint: str, data: bytes):
        self.sock.sendto(data, parse_endpoint(endpoint))

    def receive(self, timeout: float):
        self.sock.settimeout(max(timeout, 0.0) or 0.000_1)
        try:
            data, addr = self.sock.recvfrom(65_535)
        except (socket.timeout, BlockingIOError):
            return None
        return f"{addr[0]}:{addr[1]}", data

    def close(self):
        self.sock.close()


@dataclass(frozen=True)
class SimConfig:
    drop_probability: float = 0.0
    duplicate_probability: float = 0.0
    max_delay_ticks: int = 0
    seed: int = 0

    def __post_init__(self):
        for name in ("drop_probability", "duplicate_probability"):
            p = getattr(self, name)
            if not 0.0 <= p < 1.0:
                raise ValueError(f"{name} must lie in [0, 1)")
        if self.max_delay_ticks < 0:
            raise ValueError("max_delay_ticks must be >= 0")


@dataclass
class _Flight:
    deliver_tick: int
    seq: int
    dest: str
    source: str
    data: bytes


class SimNetwork:
    """Deterministic in-process datagram network.

    Loss, duplication, and delay are decided at send time from a single
    seeded stream, so a full trace is a pure function of the seed and the
    sequence of sends. Messages sent at tick t arrive at t + 1 + delay.
    """

    def __init__(self, config: SimConfig):
        self.config = config
        self.rng = random.Random(config.seed)
        self.tick = 0
        self.endpoints: dict[str, SimEndpoint] = {}
        self._in_flight: list[_Flight] = []
        self._seq = 0

    def endpoint(self, name: str) -> "SimEndpoint":
        if name in self.endpoints:
            raise ValueError(f"endpoint {name!r} already registered")
        ep = SimEndpoint(name, self)
        self.endpoints[name] = ep
        return ep

    def send(self, source: str, dest: str, data: bytes):
        if self.rng.random() < self.config.drop_probability:
            return
        copies = 2 if self.rng.random() < self.config.duplicate_probability else 1
        for _ in range(copies):
            delay = self.rng.randint(0, self.config.max_delay_ticks)
            self._in_flight.append(_Flight(self.tick + 1 + delay, self._seq, dest, source, data))
            self._seq += 1

    def step(self) -> list[tuple[str, str, bytes]]:
        """Advance one tick; returns (dest, source, data) deliveries in order."""
        self.tick += 1
        due = [f for f in self._in_flight if f.deliver_tick <= self.tick]
        self._in_flight = [f for f in self._in_flight if f.deliver_tick > self.tick]
        due.sort(key=lambda f: (f.deliver_tick, f.seq))
        delivered = []
        for flight in due:
            ep = self.endpoints.get(flight.dest)
            if ep is not None:
                ep.inbox.append((flight.source, flight.data))
                delivered.append((flight.dest, flight.source, flight.data))
        return delivered

    def run_until_quiet(self, max_ticks: int = 10_000) -> int:
        """Step until nothing is in flight; returns ticks consumed."""
        start = self.tick
        while self._in_flight and self.tick - start < max_ticks:
            self.step()
        return self.tick - start


@dataclass
class SimEndpoint:
    name: str
    network: SimNetwork
    inbox: deque = field(default_factory=deque)

    def send(self, endpoint: str, data: bytes):
        self.network.send(self.name, endpoint, data)

    def receive(self, timeout: float = 0.0):
        """Drain-only receive; the test or driver steps the network."""
        if self.inbox:
            return self.inbox.popleft()
        return None


# --- bootstrap ---------------------------------------------------------------


class BootstrapError(Exception):
    pass


def _request(transport, peer: str, message: WireMessage, collect, clock, sleep):
    """Send, then wait through the retry schedule for collect() to finish."""
    for wait in RETRY_WAITS:
        transport.send(peer, encode_message(message))
        deadline = clock() + wait
        while True:
            remaining = deadline - clock()
            if remaining <= 0:
                break
            received = transport.receive(remaining)
            if received is None:
                if sleep is not None:
                    sleep(min(remaining, 0.01))
                continue
            _, data = received
            try:
                reply = decode_message(data)
            except DecodeError as exc:
                log.debug("ignoring undecodable reply: %s", exc)
                continue
            result = collect(reply)
            if result is not None:
                return result
    raise BootstrapError(f"no usable reply from {peer}")


def bootstrap(
    transport,
    peer: str,
    genesis: Block,
    own_endpoint: str,
    desired_interval: float,
    peer_table: PeerTable | None = None,
    clock=time.monotonic,
    sleep=time.sleep,
) -> tuple[Chain, list[str]]:
    """Fetch and validate a peer's chain and peer list, then announce.

    Raises BootstrapError on timeout (retry schedule 0.5/1/2 s) or when the
    served chain fails validation; a bad peer is dropped from the table.
    """
    assembler = SnapshotAssembler()

    def collect_chain(reply: WireMessage):
        if reply.kind != MessageKind.CHAIN_SNAPSHOT:
            return None
        try:
            return assembler.add(reply.payload)
        except EncodingError as exc:
            log.info("bad snapshot chunk from %s: %s", peer, exc)
            return None

    raw = _request(transport, peer, WireMessage(MessageKind.GET_CHAIN, b""), collect_chain, clock, sleep)
    try:
        chain = deserialize_chain(raw)
        chain.check_structure()
        problems = validate_chain(chain, genesis, desired_interval)
    except ValueError as exc:  # EncodingError and InvalidChainError included
        problems = [(0, str(exc))]
        chain = None
    if chain is None or problems:
        if peer_table is not None:
            peer_table.remove(peer)
        raise BootstrapError(f"peer {peer} served an invalid chain: {problems}")

    def collect_peers(reply: WireMessage):
        if reply.kind != MessageKind.PEER_LIST:
            return None
        try:
            return decode_peer_list(reply.payload)
        except EncodingError as exc:
            log.info("bad peer list from %s: %s", peer, exc)
            return None

    peers = _request(transport, peer, WireMessage(MessageKind.GET_PEERS, b""), collect_peers, clock, sleep)
    transport.send(peer, encode_message(WireMessage(MessageKind.ANNOUNCE, encode_announce(own_endpoint))))
    return chain, peers
