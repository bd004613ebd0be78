"""Blockchain kernel: hashing, compact targets, blocks, mining, fork choice.

Block format mirrors bitcoin's 80-byte header idea with two deviations:
the target exponent is biased by 4 instead of 3, and the body carries
model updates plus their weighted aggregate instead of transactions.
All integers little-endian on the wire; hash comparisons interpret the
32-byte digest as a big-endian integer.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, replace

import numpy as np

from ._ripemd160 import ripemd160
from .fedavg import aggregate_matches
from .params import (
    EncodingError,
    ModelConfig,
    ModelUpdate,
    ParameterVector,
    deserialize_params,
    deserialize_update,
    serialize_params,
    serialize_update,
)

HEADER_SIZE = 88
HASH_ZERO = bytes(32)
AGGREGATE_TOL = 1e-9

# Largest exponent nibble we accept; at theta=0xFFFFFF this expands past
# 2**256, which deliberately makes "every hash wins" expressible.
MAX_EXPONENT = 0x23
EXPONENT_BIAS = 4

# A new block's timestamp may lag its parent by at most this many seconds.
TIMESTAMP_SLACK = 600

RETARGET_WINDOW = 16
RETARGET_CLAMP = 4

NONCE_MASK = (1 << 64) - 1


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def double_sha256(data: bytes) -> bytes:
    return sha256(sha256(data))


def address_of(pubkey_bytes: bytes) -> bytes:
    """20-byte address: RIPEMD160 over SHA256 of the public identifier."""
    if not pubkey_bytes:
        raise ValueError("cannot derive an address from empty bytes")
    return ripemd160(sha256(pubkey_bytes))


# --- compact difficulty target ----------------------------------------------


@dataclass(frozen=True)
class CompactTarget:
    """4-byte target: exponent byte, then a 3-byte mantissa."""

    bits: int

    def __post_init__(self):
        if not 0 <= self.bits <= 0xFFFFFFFF:
            raise ValueError("compact target must fit in 32 bits")
        if self.mantissa == 0:
            raise ValueError("compact target mantissa must be nonzero")
        if self.exponent > MAX_EXPONENT:
            raise ValueError(f"compact target exponent {self.exponent:#x} too large")

    @property
    def exponent(self) -> int:
        return self.bits >> 24

    @property
    def mantissa(self) -> int:
        return self.bits & 0xFFFFFF


def expand_target(c: CompactTarget) -> int:
    """mantissa * 256**(exponent-4); negative exponents floor-shift right."""
    shift = 8 * (c.exponent - EXPONENT_BIAS)
    if shift >= 0:
        return c.mantissa << shift
    return c.mantissa >> -shift


def compress_target(t: int) -> CompactTarget:
    """Canonical compact encoding keeping the top three bytes of t."""
    if t <= 0:
        raise ValueError("target must be positive")
    nbytes = (t.bit_length() + 7) // 8
    if nbytes <= 3:
        mantissa = t << (8 * (3 - nbytes))
    else:
        mantissa = t >> (8 * (nbytes - 3))
    exponent = nbytes + 1
    if exponent > MAX_EXPONENT:
        raise ValueError("target too large for compact encoding")
    return CompactTarget((exponent << 24) | mantissa)


def work_for_target(c: CompactTarget) -> int:
    """Expected hashes to beat the target: floor(2^256 / (target+1))."""
    return (1 << 256) // (expand_target(c) + 1)


# --- headers and blocks ------------------------------------------------------


@dataclass(frozen=True)
class BlockHeader:
    version: int
    prev_hash: bytes
    merkle_root: bytes
    timestamp: int
    target: CompactTarget
    nonce: int

    def __post_init__(self):
        if len(self.prev_hash) != 32 or len(self.merkle_root) != 32:
            raise ValueError("prev_hash and merkle_root must be 32 bytes")


def serialize_header(h: BlockHeader) -> bytes:
    out = struct.pack("<I", h.version)
    out += h.prev_hash
    out += h.merkle_root
    out += struct.pack("<QIQ", h.timestamp, h.target.bits, h.nonce)
    assert len(out) == HEADER_SIZE
    return out


def deserialize_header(data: bytes, offset: int = 0) -> tuple[BlockHeader, int]:
    if len(data) - offset < HEADER_SIZE:
        raise EncodingError("header truncated")
    (version,) = struct.unpack_from("<I", data, offset)
    prev_hash = bytes(data[offset + 4 : offset + 36])
    merkle = bytes(data[offset + 36 : offset + 68])
    timestamp, bits, nonce = struct.unpack_from("<QIQ", data, offset + 68)
    try:
        target = CompactTarget(bits)
    except ValueError as exc:
        raise EncodingError(str(exc)) from None
    return BlockHeader(version, prev_hash, merkle, timestamp, target, nonce), offset + HEADER_SIZE


def header_hash(h: BlockHeader) -> bytes:
    return double_sha256(serialize_header(h))


def hash_int(digest: bytes) -> int:
    return int.from_bytes(digest, "big")


def header_meets_target(h: BlockHeader) -> bool:
    return hash_int(header_hash(h)) < expand_target(h.target)


def merkle_root(updates) -> bytes:
    """Binary merkle tree over double-SHA256 of serialized updates."""
    level = [double_sha256(serialize_update(u)) for u in updates]
    if not level:
        return HASH_ZERO
    while len(level) > 1:
        if len(level) % 2:
            level.append(level[-1])
        level = [
            double_sha256(level[i] + level[i + 1]) for i in range(0, len(level), 2)
        ]
    return level[0]


@dataclass(frozen=True)
class Block:
    header: BlockHeader
    updates: tuple
    aggregate: ParameterVector
    height: int

    def __post_init__(self):
        object.__setattr__(self, "updates", tuple(self.updates))

    @property
    def hash(self) -> bytes:
        return header_hash(self.header)


def serialize_block(b: Block) -> bytes:
    out = serialize_header(b.header)
    out += struct.pack("<I", len(b.updates))
    for u in b.updates:
        out += serialize_update(u)
    out += serialize_params(b.aggregate)
    return out


def deserialize_block(data: bytes, height: int, offset: int = 0) -> tuple[Block, int]:
    header, offset = deserialize_header(data, offset)
    if len(data) - offset < 4:
        raise EncodingError("block truncated at update count")
    (count,) = struct.unpack_from("<I", data, offset)
    offset += 4
    updates = []
    for _ in range(count):
        u, offset = deserialize_update(data, offset)
        updates.append(u)
    aggregate, offset = deserialize_params(data, offset)
    return Block(header, tuple(updates), aggregate, height), offset


def make_genesis(model: ModelConfig, initial_target: CompactTarget) -> Block:
    """Shared-config genesis: timestamp 0, no updates, seed-derived params."""
    from .trainer import init_params

    header = BlockHeader(
        version=1,
        prev_hash=HASH_ZERO,
        merkle_root=merkle_root([]),
        timestamp=0,
        target=initial_target,
        nonce=0,
    )
    return Block(header, (), init_params(model), 0)


# --- mining ------------------------------------------------------------------


def mine(template: BlockHeader, max_attempts: int):
    """Scan nonces from the template's value; None when the budget runs out."""
    target = expand_target(template.target)
    buf = bytearray(serialize_header(template))
    nonce = template.nonce
    for _ in range(max_attempts):
        buf[80:88] = nonce.to_bytes(8, "little")
        digest = sha256(sha256(buf))
        if int.from_bytes(digest, "big") < target:
            return replace(template, nonce=nonce)
        nonce = (nonce + 1) & NONCE_MASK
    return None


# --- validation --------------------------------------------------------------


def validate_block(b: Block, parent: Block, expected_target: CompactTarget) -> list[str]:
    """All consensus violations for a block against its parent; [] means ok."""
    violations = []
    if b.header.prev_hash != parent.hash:
        violations.append("prev-hash")
    if b.height != parent.height + 1:
        violations.append("height")
    if b.header.target != expected_target:
        violations.append("target")
    if not header_meets_target(b.header):
        violations.append("pow")
    if b.header.merkle_root != merkle_root(b.updates):
        violations.append("merkle-root")
    if b.header.timestamp <= parent.header.timestamp - TIMESTAMP_SLACK:
        violations.append("timestamp")
    if not b.updates:
        violations.append("empty-updates")
        return violations
    dims = {u.params.dim for u in b.updates}
    if len(dims) != 1 or any(u.sample_count < 1 for u in b.updates):
        violations.append("update-form")
        return violations
    if b.aggregate.dim not in dims or not aggregate_matches(
        b.updates, b.aggregate, AGGREGATE_TOL
    ):
        violations.append("aggregate-mismatch")
    return violations


class InvalidChainError(ValueError):
    pass


class Chain:
    """Ordered blocks from genesis, with cached cumulative work."""

    def __init__(self, blocks):
        self.blocks = list(blocks)
        if not self.blocks:
            raise InvalidChainError("chain must contain a genesis block")
        self.cumulative_work = sum(work_for_target(b.header.target) for b in self.blocks)

    @property
    def tip(self) -> Block:
        return self.blocks[-1]

    @property
    def height(self) -> int:
        return self.tip.height

    def __len__(self):
        return len(self.blocks)

    def headers(self) -> list[BlockHeader]:
        return [b.header for b in self.blocks]

    def extend(self, block: Block) -> "Chain":
        if block.header.prev_hash != self.tip.hash or block.height != self.height + 1:
            raise InvalidChainError("block does not extend the tip")
        return Chain(self.blocks + [block])

    def check_structure(self):
        """Linkage, heights, and PoW; raises InvalidChainError on failure."""
        genesis = self.blocks[0]
        if genesis.height != 0 or genesis.header.prev_hash != HASH_ZERO:
            raise InvalidChainError("malformed genesis")
        for prev, cur in zip(self.blocks, self.blocks[1:]):
            if cur.header.prev_hash != prev.hash:
                raise InvalidChainError(f"broken linkage at height {cur.height}")
            if cur.height != prev.height + 1:
                raise InvalidChainError(f"non-contiguous height {cur.height}")
            if not header_meets_target(cur.header):
                raise InvalidChainError(f"insufficient work at height {cur.height}")


def validate_chain(chain: Chain, genesis: Block, desired_interval: float) -> list[tuple[int, str]]:
    """Full consensus validation against the configured genesis."""
    problems = []
    if serialize_block(chain.blocks[0]) != serialize_block(genesis):
        problems.append((0, "genesis-mismatch"))
        return problems
    for i in range(1, len(chain.blocks)):
        expected = retarget([b.header for b in chain.blocks[:i]], desired_interval)
        for v in validate_block(chain.blocks[i], chain.blocks[i - 1], expected):
            problems.append((i, v))
    return problems


def choose_chain(a: Chain, b: Chain) -> Chain:
    """Most cumulative work wins; ties go to the lower tip hash."""
    a.check_structure()
    b.check_structure()
    if a.cumulative_work != b.cumulative_work:
        return a if a.cumulative_work > b.cumulative_work else b
    return a if hash_int(a.tip.hash) <= hash_int(b.tip.hash) else b


def retarget(recent, desired_interval: float, window: int = RETARGET_WINDOW) -> CompactTarget:
    """Rescale the tip target by the clamped observed/desired interval ratio."""
    recent = list(recent)
    if not recent:
        raise ValueError("retarget needs at least one header")
    old = recent[-1].target
    if len(recent) < window:
        return old
    tail = recent[-window:]
    span_ms = 1000 * (tail[-1].timestamp - tail[0].timestamp)
    desired_ms = round(1000 * desired_interval) * (window - 1)
    if desired_ms <= 0:
        raise ValueError("desired interval must be positive")
    num, den = max(span_ms, 0), desired_ms
    if num * RETARGET_CLAMP < den:
        num, den = 1, RETARGET_CLAMP
    elif num > RETARGET_CLAMP * den:
        num, den = RETARGET_CLAMP, 1
    # cap at the largest encodable target so easing difficulty cannot
    # push the exponent past MAX_EXPONENT
    ceiling = expand_target(CompactTarget((MAX_EXPONENT << 24) | 0xFFFFFF))
    new_expanded = min(max(1, expand_target(old) * num // den), ceiling)
    return compress_target(new_expanded)


def global_model(chain: Chain) -> ParameterVector:
    """Aggregate of the highest update-bearing block, else genesis params."""
    for block in reversed(chain.blocks):
        if block.updates:
            return block.aggregate
    return chain.blocks[0].aggregate


# --- persistence -------------------------------------------------------------


def save_chain(chain: Chain, path):
    with open(path, "wb") as fh:
        for block in chain.blocks:
            raw = serialize_block(block)
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)


def append_block_file(path, block: Block):
    raw = serialize_block(block)
    with open(path, "ab") as fh:
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)


def load_chain_blocks(path) -> list[Block]:
    """Parse the length-prefixed block file; raises EncodingError on garbage."""
    with open(path, "rb") as fh:
        data = fh.read()
    blocks = []
    offset = 0
    while offset < len(data):
        if len(data) - offset < 4:
            raise EncodingError("trailing bytes shorter than a length prefix")
        (length,) = struct.unpack_from("<I", data, offset)
        offset += 4
        if len(data) - offset < length:
            raise EncodingError("truncated block record")
        record = data[offset : offset + length]
        block, consumed = deserialize_block(record, height=len(blocks))
        if consumed != length:
            raise EncodingError("block record has trailing bytes")
        blocks.append(block)
        offset += length
    return blocks
