"""One participant: role wiring, the train/submit/mine/adopt round loop,
training offload, restart recovery, and the deterministic multi-node
simulation driver.

A node owns its chain copy and consumes an ordered stream of events;
network transports never touch chain state directly. Round identity is
chain height: an update trained against the tip at height h carries
round h and is eligible for the block at height h+1.
"""

from __future__ import annotations

import hashlib
import json
import logging
import queue
import random
import struct
import threading
import time
from dataclasses import dataclass, replace
from pathlib import Path

from .bridge import JOB_ID_LEN, BridgeListener, BridgeRequest
from .chain import (
    Block,
    BlockHeader,
    Chain,
    CompactTarget,
    address_of,
    deserialize_block,
    make_genesis,
    merkle_root,
    choose_chain,
    mine,
    retarget,
    save_chain,
    serialize_block,
    validate_block,
    validate_chain,
    global_model,
)
from .fedavg import aggregate
from .net import (
    DEFAULT_BROADCAST_PORT,
    DEFAULT_SYNC_PORT,
    DecodeError,
    GossipState,
    MessageKind,
    decode_message,
    PeerTable,
    SimConfig,
    SimNetwork,
    SnapshotAssembler,
    UdpTransport,
    WireMessage,
    bootstrap,
    chunk_snapshot,
    decode_announce,
    decode_peer_list,
    deserialize_chain,
    encode_announce,
    encode_message,
    encode_peer_list,
    gossip,
    parse_endpoint,
    serialize_chain,
)
from .params import (
    Dataset,
    EncodingError,
    ModelConfig,
    ModelUpdate,
    ParameterVector,
    deserialize_dataset,
    deserialize_model_config,
    deserialize_params,
    deserialize_update,
    param_count,
    serialize_dataset,
    serialize_model_config,
    serialize_params,
    serialize_update,
)
from .trainer import (
    TrainSpec,
    deserialize_train_spec,
    evaluate,
    load_csv,
    serialize_train_spec,
    synthetic_blobs,
    train_local,
)

log = logging.getLogger("fedchain.node")

ROLES = ("client", "miner", "relay", "worker")
POOL_CAPACITY = 1024


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from arbitrary labels; independent of hash salting."""
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


# --- configuration -----------------------------------------------------------


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NodeConfig:
    roles: frozenset
    model: ModelConfig
    train: TrainSpec
    dataset_path: str | None = None
    synthetic: tuple | None = None  # (n_samples, features, classes, seed)
    chain_path: str | None = None
    host: str = "127.0.0.1"
    sync_port: int = DEFAULT_SYNC_PORT
    broadcast_port: int = DEFAULT_BROADCAST_PORT
    advertise: str | None = None
    peer: str | None = None
    desired_block_interval: float = 2.0
    participation_probability: float = 1.0
    node_seed: int = 0
    initial_target_bits: int = 0x23FFFFFF
    bridge_port: int = 0
    mine_budget: int = 500_000

    def __post_init__(self):
        object.__setattr__(self, "roles", frozenset(self.roles))
        if not self.roles:
            raise ConfigError("at least one role is required")
        unknown = self.roles - set(ROLES)
        if unknown:
            raise ConfigError(f"unknown roles: {sorted(unknown)}")
        if not 0.0 <= self.participation_probability <= 1.0:
            raise ConfigError("participation_probability must lie in [0, 1]")
        if self.desired_block_interval <= 0:
            raise ConfigError("desired_block_interval must be positive")
        # peers advertise one endpoint; the broadcast port is derived from it
        if self.broadcast_port != self.sync_port + 1:
            raise ConfigError("broadcast_port must be sync_port + 1")
        if self.mine_budget < 0:
            raise ConfigError("mine_budget must be >= 0")
        try:
            CompactTarget(self.initial_target_bits)
        except ValueError as exc:
            raise ConfigError(f"initial_target: {exc}") from None

    @property
    def endpoint(self) -> str:
        return self.advertise or f"{self.host}:{self.sync_port}"


_CONFIG_DEFAULTS = {
    "roles": "client,miner",
    "layer_sizes": "4,16,3",
    "activation": "relu",
    "model_seed": "0",
    "epochs": "1",
    "batch_size": "16",
    "learning_rate": "0.1",
    "train_seed": "0",
    "dataset": "",
    "synthetic": "240,4,3,11",
    "chain_path": "",
    "host": "127.0.0.1",
    "sync_port": str(DEFAULT_SYNC_PORT),
    "broadcast_port": str(DEFAULT_BROADCAST_PORT),
    "advertise": "",
    "peer": "",
    "desired_block_interval": "2.0",
    "participation_probability": "1.0",
    "node_seed": "0",
    "initial_target": "0x23ffffff",
    "bridge_port": "0",
    "mine_budget": "500000",
}


def parse_config_text(text: str) -> dict:
    """Flat `key = value` lines; `#` starts a comment; blank lines ignored."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected `key = value`, got {raw!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = value.strip()
    return values


def _ints(csv_text: str) -> tuple:
    return tuple(int(part.strip()) for part in csv_text.split(",") if part.strip())


def build_node_config(values: dict) -> NodeConfig:
    unknown = set(values) - set(_CONFIG_DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    merged = {**_CONFIG_DEFAULTS, **values}
    try:
        model = ModelConfig(
            _ints(merged["layer_sizes"]), merged["activation"], int(merged["model_seed"])
        )
        train = TrainSpec(
            int(merged["epochs"]),
            int(merged["batch_size"]),
            float(merged["learning_rate"]),
            int(merged["train_seed"]),
        )
        synthetic = _ints(merged["synthetic"]) if not merged["dataset"] else None
        if synthetic is not None and len(synthetic) != 4:
            raise ConfigError("synthetic needs n,features,classes,seed")
        return NodeConfig(
            roles=frozenset(r.strip() for r in merged["roles"].split(",") if r.strip()),
            model=model,
            train=train,
            dataset_path=merged["dataset"] or None,
            synthetic=synthetic,
            chain_path=merged["chain_path"] or None,
            host=merged["host"],
            sync_port=int(merged["sync_port"]),
            broadcast_port=int(merged["broadcast_port"]),
            advertise=merged["advertise"] or None,
            peer=merged["peer"] or None,
            desired_block_interval=float(merged["desired_block_interval"]),
            participation_probability=float(merged["participation_probability"]),
            node_seed=int(merged["node_seed"]),
            initial_target_bits=int(merged["initial_target"], 0),
            bridge_port=int(merged["bridge_port"]),
            mine_budget=int(merged["mine_budget"]),
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_node_config(path=None, overrides: dict | None = None) -> NodeConfig:
    values = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        values = parse_config_text(text)
    values.update(overrides or {})
    return build_node_config(values)


def load_dataset(config: NodeConfig) -> Dataset:
    if config.dataset_path is not None:
        return load_csv(config.dataset_path)
    if config.synthetic is None:
        raise ConfigError("config names neither a dataset file nor a synthetic spec")
    n, features, classes, seed = config.synthetic
    if features != config.model.layer_sizes[0] or classes != config.model.layer_sizes[-1]:
        raise ConfigError("synthetic shape does not match the model's input/output widths")
    return synthetic_blobs(n, features, classes, seed=seed)


# --- pending update pool -----------------------------------------------------


class PendingPool:
    """Updates awaiting inclusion; first submission per (client, round) wins."""

    def __init__(self, dim: int, capacity: int = POOL_CAPACITY):
        self.dim = dim
        self.capacity = capacity
        self._entries: dict[tuple, ModelUpdate] = {}

    def insert(self, u: ModelUpdate, current_height: int) -> bool:
        if u.params.dim != self.dim:
            return False
        if u.round < current_height:
            return False
        if (u.client_id, u.round) in self._entries:
            return False
        if len(self._entries) >= self.capacity:
            return False
        self._entries[(u.client_id, u.round)] = u
        return True

    def updates_for(self, round: int) -> list:
        return [u for u in self._entries.values() if u.round == round]

    def prune(self, height: int):
        self._entries = {k: u for k, u in self._entries.items() if u.round >= height}

    def __len__(self):
        return len(self._entries)


# --- offload protocol --------------------------------------------------------

TRANSFORMS = {"identity": deserialize_dataset}


@dataclass(frozen=True)
class OffloadJob:
    job_id: bytes
    client_id: bytes
    round: int
    model: ModelConfig
    start_params: ParameterVector
    spec: TrainSpec
    transform: str
    payload: bytes
    reply_endpoint: str

    def __post_init__(self):
        if len(self.job_id) != JOB_ID_LEN:
            raise ValueError("job_id must be 16 bytes")
        if len(self.client_id) != 20:
            raise ValueError("client_id must be 20 bytes")


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def _unpack_str(data: bytes, offset: int) -> tuple[str, int]:
    if len(data) - offset < 2:
        raise EncodingError("string length prefix truncated")
    (length,) = struct.unpack_from("<H", data, offset)
    end = offset + 2 + length
    if len(data) < end:
        raise EncodingError("string body truncated")
    return data[offset + 2 : end].decode("utf-8"), end


def encode_offload_job(job: OffloadJob) -> bytes:
    return (
        job.job_id
        + job.client_id
        + struct.pack("<Q", job.round)
        + serialize_model_config(job.model)
        + serialize_params(job.start_params)
        + serialize_train_spec(job.spec)
        + _pack_str(job.transform)
        + struct.pack("<I", len(job.payload))
        + job.payload
        + _pack_str(job.reply_endpoint)
    )


def decode_offload_job(data: bytes) -> OffloadJob:
    if len(data) < JOB_ID_LEN + 20 + 8:
        raise EncodingError("offload job truncated")
    job_id = bytes(data[:JOB_ID_LEN])
    client_id = bytes(data[JOB_ID_LEN : JOB_ID_LEN + 20])
    offset = JOB_ID_LEN + 20
    (rnd,) = struct.unpack_from("<Q", data, offset)
    offset += 8
    model, offset = deserialize_model_config(data, offset)
    params, offset = deserialize_params(data, offset)
    spec, offset = deserialize_train_spec(data, offset)
    transform, offset = _unpack_str(data, offset)
    if len(data) - offset < 4:
        raise EncodingError("offload payload length truncated")
    (plen,) = struct.unpack_from("<I", data, offset)
    offset += 4
    if len(data) - offset < plen:
        raise EncodingError("offload payload truncated")
    payload = bytes(data[offset : offset + plen])
    offset += plen
    reply, offset = _unpack_str(data, offset)
    if offset != len(data):
        raise EncodingError("trailing bytes in offload job")
    return OffloadJob(job_id, client_id, rnd, model, params, spec, transform, payload, reply)


def encode_offload_result(job_id: bytes, update: ModelUpdate) -> bytes:
    return job_id + serialize_update(update)


def decode_offload_result(data: bytes) -> tuple[bytes, ModelUpdate]:
    if len(data) < JOB_ID_LEN:
        raise EncodingError("offload result truncated")
    update, offset = deserialize_update(data, JOB_ID_LEN)
    if offset != len(data):
        raise EncodingError("trailing bytes in offload result")
    return bytes(data[:JOB_ID_LEN]), update


# --- block gossip payload ----------------------------------------------------


def encode_block_gossip(block: Block) -> bytes:
    return struct.pack("<Q", block.height) + serialize_block(block)


def decode_block_gossip(payload: bytes) -> Block:
    if len(payload) < 8:
        raise EncodingError("block gossip truncated")
    (height,) = struct.unpack_from("<Q", payload, 0)
    block, offset = deserialize_block(payload, height, 8)
    if offset != len(payload):
        raise EncodingError("trailing bytes in block gossip")
    return block


# --- node --------------------------------------------------------------------


class Node:
    """Single participant; all sends go through the injected channels."""

    def __init__(
        self,
        config: NodeConfig,
        *,
        sync_channel,
        bcast_channel,
        dataset: Dataset | None = None,
        chain: Chain | None = None,
        bridge: BridgeListener | None = None,
        on_event=None,
    ):
        self.config = config
        self.sync = sync_channel
        self.bcast = bcast_channel
        self.bridge = bridge
        self.genesis = make_genesis(config.model, CompactTarget(config.initial_target_bits))
        self.chain = chain if chain is not None else Chain([self.genesis])
        self.client_id = address_of(f"node-{config.node_seed}".encode())
        self.dataset = dataset
        if self.dataset is None and "client" in config.roles:
            self.dataset = load_dataset(config)
        self.pool = PendingPool(param_count(config.model))
        self.peers = PeerTable()
        self.gossip_state = GossipState()
        self._assemblers: dict[str, SnapshotAssembler] = {}
        self._known_hashes = {b.hash for b in self.chain.blocks}
        self._pending_offloads: dict[bytes, int] = {}
        self._offload_results: dict[bytes, ModelUpdate] = {}
        self._job_counter = 0
        self._on_event = on_event

    # -- small helpers --

    @property
    def endpoint(self) -> str:
        return self.config.endpoint

    def _emit(self, kind: str, **fields):
        if self._on_event is not None:
            self._on_event({"event": kind, **fields})

    @staticmethod
    def bcast_endpoint_of(sync_endpoint: str) -> str:
        host, port = parse_endpoint(sync_endpoint)
        return f"{host}:{port + 1}"

    @staticmethod
    def sync_endpoint_of(bcast_endpoint: str) -> str:
        host, port = parse_endpoint(bcast_endpoint)
        return f"{host}:{port - 1}"

    def participates(self, round: int) -> bool:
        p = self.config.participation_probability
        return random.Random(derive_seed("participate", self.config.node_seed, round)).random() < p

    def _round_spec(self, round: int) -> TrainSpec:
        return replace(self.config.train, seed=derive_seed("train", self.config.train.seed, round))

    def _expected_target(self) -> CompactTarget:
        return retarget(self.chain.headers(), self.config.desired_block_interval)

    def _active_peers(self, now: float) -> list:
        return self.peers.active(now)

    # -- chain adoption --

    def _adopt(self, chain: Chain, now: float, origin: str):
        self.chain = chain
        self._known_hashes = {b.hash for b in chain.blocks}
        self.pool.prune(chain.height)
        if self.config.chain_path:
            save_chain(chain, self.config.chain_path)
        self._emit("adopt", height=chain.height, tip=chain.tip.hash.hex(), origin=origin)

    def _gossip_block(self, block: Block, now: float):
        payload = encode_block_gossip(block)
        peers = [self.bcast_endpoint_of(p) for p in self._active_peers(now)]
        gossip(self.bcast, MessageKind.BLOCK_GOSSIP, payload, peers, self.gossip_state)

    def _gossip_update(self, update: ModelUpdate, now: float):
        payload = serialize_update(update)
        peers = [self.bcast_endpoint_of(p) for p in self._active_peers(now)]
        gossip(self.bcast, MessageKind.UPDATE_GOSSIP, payload, peers, self.gossip_state)

    # -- message handling --

    def handle_sync(self, source: str, data: bytes, now: float):
        try:
            msg = decode_message(data)
        except DecodeError as exc:
            log.debug("sync message from %s dropped: %s", source, exc)
            return
        if msg.kind == MessageKind.GET_CHAIN:
            for chunk in chunk_snapshot(serialize_chain(self.chain)):
                self.sync.send(source, encode_message(WireMessage(MessageKind.CHAIN_SNAPSHOT, chunk)))
            self.peers.touch(source, now)
        elif msg.kind == MessageKind.CHAIN_SNAPSHOT:
            self._handle_snapshot(source, msg.payload, now)
        elif msg.kind == MessageKind.GET_PEERS:
            listed = [p for p in self._active_peers(now) if p != source]
            listed.append(self.endpoint)
            self.sync.send(source, encode_message(WireMessage(MessageKind.PEER_LIST, encode_peer_list(listed))))
            self.peers.touch(source, now)
        elif msg.kind == MessageKind.PEER_LIST:
            try:
                for ep in decode_peer_list(msg.payload):
                    if ep != self.endpoint:
                        self.peers.touch(ep, now)
            except ValueError as exc:
                log.debug("bad peer list from %s: %s", source, exc)
        elif msg.kind == MessageKind.ANNOUNCE:
            try:
                self.peers.touch(decode_announce(msg.payload), now)
            except ValueError as exc:
                log.debug("bad announce from %s: %s", source, exc)
        elif msg.kind == MessageKind.OFFLOAD_JOB:
            self._handle_offload_job(msg.payload, now)
        elif msg.kind == MessageKind.OFFLOAD_RESULT:
            self._handle_offload_result(msg.payload)
        else:
            log.debug("kind %s ignored on sync channel", msg.kind)

    def handle_broadcast(self, source: str, data: bytes, now: float):
        try:
            msg = decode_message(data)
        except DecodeError as exc:
            log.debug("broadcast message from %s dropped: %s", source, exc)
            return
        if msg.kind == MessageKind.UPDATE_GOSSIP:
            try:
                update, consumed = deserialize_update(msg.payload)
                if consumed != len(msg.payload):
                    raise EncodingError("trailing bytes in update gossip")
            except EncodingError as exc:
                log.debug("bad update gossip from %s: %s", source, exc)
                return
            self._handle_update(update, now)
        elif msg.kind == MessageKind.BLOCK_GOSSIP:
            try:
                block = decode_block_gossip(msg.payload)
            except EncodingError as exc:
                log.debug("bad block gossip from %s: %s", source, exc)
                return
            self._handle_block(block, source, now)
        else:
            log.debug("kind %s ignored on broadcast channel", msg.kind)

    def _handle_snapshot(self, source: str, payload: bytes, now: float):
        asm = self._assemblers.setdefault(source, SnapshotAssembler())
        try:
            raw = asm.add(payload)
        except EncodingError as exc:
            log.debug("bad snapshot chunk from %s: %s", source, exc)
            return
        if raw is None:
            return
        del self._assemblers[source]
        try:
            candidate = deserialize_chain(raw)
            candidate.check_structure()
            problems = validate_chain(candidate, self.genesis, self.config.desired_block_interval)
        except ValueError as exc:
            log.info("snapshot from %s rejected: %s", source, exc)
            return
        if problems:
            log.info("snapshot from %s rejected: %s", source, problems)
            return
        if choose_chain(self.chain, candidate) is candidate and candidate.tip.hash != self.chain.tip.hash:
            self._adopt(candidate, now, origin=f"snapshot:{source}")

    def _handle_update(self, update: ModelUpdate, now: float):
        if self.pool.insert(update, self.chain.height):
            self._emit("update-accepted", client=update.client_id.hex(), round=update.round)
            if {"relay", "miner", "client"} & self.config.roles:
                self._gossip_update(update, now)

    def _handle_block(self, block: Block, source: str, now: float):
        if block.hash in self._known_hashes:
            return
        if block.header.prev_hash == self.chain.tip.hash and block.height == self.chain.height + 1:
            violations = validate_block(block, self.chain.tip, self._expected_target())
            if violations:
                log.info("block %s rejected: %s", block.hash.hex()[:12], violations)
                return
            self._adopt(self.chain.extend(block), now, origin=f"gossip:{source}")
            self._gossip_block(block, now)
        else:
            # does not connect to our tip: pull the sender's full chain
            sync_source = self.sync_endpoint_of(source)
            self._emit("resync", peer=sync_source, height=block.height)
            self.sync.send(sync_source, encode_message(WireMessage(MessageKind.GET_CHAIN, b"")))

    # -- offload --

    def request_offload(self, worker_sync_endpoint: str, now: float) -> bytes | None:
        round = self.chain.height
        job_id = hashlib.sha256(
            f"job:{self.config.node_seed}:{round}:{self._job_counter}".encode()
        ).digest()[:JOB_ID_LEN]
        self._job_counter += 1
        job = OffloadJob(
            job_id,
            self.client_id,
            round,
            self.config.model,
            global_model(self.chain),
            self._round_spec(round),
            "identity",
            serialize_dataset(self.dataset),
            self.endpoint,
        )
        frame_payload = encode_offload_job(job)
        try:
            frame = encode_message(WireMessage(MessageKind.OFFLOAD_JOB, frame_payload))
        except ValueError as exc:
            log.warning("offload job does not fit a datagram (%s); training locally", exc)
            return None
        self._pending_offloads[job_id] = round
        self.sync.send(worker_sync_endpoint, frame)
        self._emit("offload-request", job=job_id.hex(), round=round)
        return job_id

    def _handle_offload_job(self, payload: bytes, now: float):
        if "worker" not in self.config.roles:
            log.debug("offload job ignored: not a worker")
            return
        try:
            job = decode_offload_job(payload)
        except EncodingError as exc:
            log.debug("bad offload job: %s", exc)
            return
        decoder = TRANSFORMS.get(job.transform)
        if decoder is None:
            log.info("offload job %s rejected: unknown transform %r", job.job_id.hex()[:8], job.transform)
            return
        try:
            data, _ = decoder(job.payload)
        except EncodingError as exc:
            log.info("offload payload undecodable under %r: %s", job.transform, exc)
            return
        update = train_local(job.model, job.start_params, data, job.spec, client_id=job.client_id, round=job.round)
        self._emit("offload-served", job=job.job_id.hex(), samples=data.n_samples)
        self.sync.send(
            job.reply_endpoint,
            encode_message(WireMessage(MessageKind.OFFLOAD_RESULT, encode_offload_result(job.job_id, update))),
        )

    def _handle_offload_result(self, payload: bytes):
        try:
            job_id, update = decode_offload_result(payload)
        except EncodingError as exc:
            log.debug("bad offload result: %s", exc)
            return
        round = self._pending_offloads.get(job_id)
        if round is None:
            log.debug("offload result for unknown job %s", job_id.hex()[:8])
            return
        ok = (
            update.client_id == self.client_id
            and update.round == round
            and update.params.dim == param_count(self.config.model)
            and update.sample_count == self.dataset.n_samples
        )
        if not ok:
            log.info("offload result for job %s failed validation", job_id.hex()[:8])
            return
        self._offload_results[job_id] = update

    def collect_offload(self, job_id: bytes, now: float) -> ModelUpdate:
        """Offloaded update if it arrived; otherwise train locally (fallback)."""
        self._pending_offloads.pop(job_id, None)
        update = self._offload_results.pop(job_id, None)
        if update is None:
            log.info("offload job %s unanswered; training locally", job_id.hex()[:8])
            update = self._local_update(self.chain.height)
        self.submit_update(update, now)
        return update

    # -- round actions --

    def _local_update(self, round: int) -> ModelUpdate:
        return train_local(
            self.config.model,
            global_model(self.chain),
            self.dataset,
            self._round_spec(round),
            client_id=self.client_id,
            round=round,
        )

    def make_update(self, now: float) -> ModelUpdate:
        """Train against the current tip, via the bridge when one is attached."""
        round = self.chain.height
        if self.bridge is not None:
            spec = self._round_spec(round)
            job_id = hashlib.sha256(f"bridge:{self.config.node_seed}:{round}".encode()).digest()[:JOB_ID_LEN]
            request = BridgeRequest(
                job_id,
                self.client_id,
                round,
                self.config.model,
                global_model(self.chain),
                spec,
                self.config.dataset_path or "",
            )
            update = self.bridge.request_train(request, self.dataset.n_samples)
            if update is not None:
                self._emit("train", round=round, via="bridge")
                return update
        update = self._local_update(round)
        self._emit("train", round=round, via="local")
        return update

    def submit_update(self, update: ModelUpdate, now: float):
        self.pool.insert(update, self.chain.height)
        self._gossip_update(update, now)

    def client_step(self, now: float) -> ModelUpdate | None:
        if "client" not in self.config.roles or not self.participates(self.chain.height):
            return None
        try:
            update = self.make_update(now)
        except ValueError as exc:
            log.warning("training failed this round: %s", exc)
            return None
        self.submit_update(update, now)
        return update

    def miner_step(self, now: float) -> Block | None:
        if "miner" not in self.config.roles:
            return None
        round = self.chain.height
        updates = self.pool.updates_for(round)
        if not updates:
            return None
        agg = aggregate(updates).params
        target = self._expected_target()
        parent = self.chain.tip
        timestamp = max(int(now), parent.header.timestamp)
        template = BlockHeader(1, parent.hash, merkle_root(updates), timestamp, target, 0)
        header = mine(template, self.config.mine_budget)
        if header is None:
            log.info("mining budget exhausted at height %d", round + 1)
            return None
        block = Block(header, tuple(updates), agg, round + 1)
        self._adopt(self.chain.extend(block), now, origin="mined")
        self._emit("mine", height=block.height, tip=block.hash.hex(), updates=len(updates))
        self._gossip_block(block, now)
        return block

    def run_round(self, now: float) -> dict:
        """One self-driven round; report lists the actions taken."""
        report = {"round": self.chain.height, "trained": False, "mined": None}
        update = self.client_step(now)
        report["trained"] = update is not None
        block = self.miner_step(now)
        if block is not None:
            report["mined"] = block.hash.hex()
        return report

    def request_resync(self, peer: str):
        self.sync.send(peer, encode_message(WireMessage(MessageKind.GET_CHAIN, b"")))


# --- recovery ----------------------------------------------------------------


def recover(chain_path, genesis: Block, desired_interval: float) -> Chain:
    """Reload and revalidate a persisted chain; truncate any invalid suffix."""
    path = Path(chain_path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        log.warning("chain file %s unreadable (%s); starting from genesis", path, exc)
        return Chain([genesis])
    blocks = []
    offset = 0
    while offset + 4 <= len(data):
        (length,) = struct.unpack_from("<I", data, offset)
        if offset + 4 + length > len(data):
            break  # torn tail record
        try:
            block, consumed = deserialize_block(data[offset + 4 : offset + 4 + length], len(blocks))
            if consumed != length:
                break
        except EncodingError:
            break
        blocks.append(block)
        offset += 4 + length
    if not blocks or serialize_block(blocks[0]) != serialize_block(genesis):
        log.warning("chain file %s lacks our genesis; starting fresh", path)
        return Chain([genesis])
    chain = Chain(blocks[:1])
    for block in blocks[1:]:
        expected = retarget(chain.headers(), desired_interval)
        if validate_block(block, chain.tip, expected):
            log.warning("chain file invalid from height %d; truncating", block.height)
            break
        chain = chain.extend(block)
    return chain


# --- deterministic multi-node simulation -------------------------------------


def run_simulation(
    n_nodes: int,
    n_rounds: int,
    sim: SimConfig,
    *,
    model: ModelConfig | None = None,
    train: TrainSpec | None = None,
    dataset_size: int = 360,
    participation: float = 1.0,
    miner_count: int = 1,
    offload_pairs: list | None = None,
    # easiest target whose blocks still carry nonzero work, so fork
    # choice prefers longer chains instead of falling back to tip-hash ties
    initial_target_bits: int = 0x21FFFFFF,
    trace_path=None,
    summary_path=None,
) -> dict:
    """Round-driven network simulation; a pure function of its arguments.

    Node 0..miner_count-1 mine; every node is a client and relay. The
    synthetic dataset is split into equal disjoint shards, one per node.
    Returns the summary (tips, heights, per-round accuracy of node 0's
    global model); optionally writes a JSON-lines trace and the summary.
    """
    if n_nodes < 1 or n_rounds < 0:
        raise ValueError("need n_nodes >= 1 and n_rounds >= 0")
    if not 1 <= miner_count <= n_nodes:
        raise ValueError("miner_count must lie in [1, n_nodes]")
    model = model or ModelConfig((4, 12, 3), seed=5)
    train = train or TrainSpec(epochs=2, batch_size=8, learning_rate=0.1, seed=3)
    offload_pairs = offload_pairs or []

    per_shard = dataset_size // n_nodes
    if per_shard < train.batch_size:
        raise ValueError("each shard needs at least one full batch")
    full_data = synthetic_blobs(
        per_shard * n_nodes,
        model.layer_sizes[0],
        model.layer_sizes[-1],
        seed=derive_seed("data", sim.seed),
    )
    shards = [full_data.subset(range(i * per_shard, (i + 1) * per_shard)) for i in range(n_nodes)]

    pump_ticks = sim.max_delay_ticks + 2
    interval = float(2 * pump_ticks)
    network = SimNetwork(sim)
    trace: list[dict] = []

    def record(node_idx):
        def on_event(event):
            trace.append({"node": node_idx, "tick": network.tick, **event})

        return on_event

    nodes = []
    for i in range(n_nodes):
        roles = {"client", "relay"}
        if i < miner_count:
            roles.add("miner")
        if any(worker == i for _, worker in offload_pairs):
            roles.add("worker")
        config = NodeConfig(
            roles=frozenset(roles),
            model=model,
            train=train,
            host=f"n{i}",
            advertise=f"n{i}:{DEFAULT_SYNC_PORT}",
            desired_block_interval=interval,
            participation_probability=participation,
            node_seed=derive_seed("node", sim.seed, i),
            initial_target_bits=initial_target_bits,
        )
        node = Node(
            config,
            sync_channel=network.endpoint(f"n{i}:{DEFAULT_SYNC_PORT}"),
            bcast_channel=network.endpoint(f"n{i}:{DEFAULT_BROADCAST_PORT}"),
            dataset=shards[i],
            on_event=record(i),
        )
        nodes.append(node)
    for node in nodes:
        for other in nodes:
            if other is not node:
                node.peers.touch(other.endpoint, 0.0)

    sync_names = {f"n{i}:{DEFAULT_SYNC_PORT}": i for i in range(n_nodes)}

    def pump(ticks: int):
        for _ in range(ticks):
            network.step()
            now = float(network.tick)
            for name, endpoint in network.endpoints.items():
                host, port = parse_endpoint(name)
                idx = sync_names.get(f"{host}:{DEFAULT_SYNC_PORT}")
                while endpoint.inbox:
                    source, data = endpoint.inbox.popleft()
                    if port == DEFAULT_SYNC_PORT:
                        nodes[idx].handle_sync(source, data, now)
                    else:
                        nodes[idx].handle_broadcast(source, data, now)

    # header event makes the trace self-describing: a summary can be
    # rebuilt from the trace file without the original arguments
    trace.append(
        {
            "event": "config",
            "nodes": n_nodes,
            "rounds": n_rounds,
            "seed": sim.seed,
            "drop_probability": sim.drop_probability,
            "tick": network.tick,
        }
    )

    offload_clients = {client: worker for client, worker in offload_pairs}
    accuracy = []
    for round_index in range(n_rounds):
        trace.append({"event": "round", "round": round_index, "tick": network.tick})
        pending_jobs = []
        for i, node in enumerate(nodes):
            if i in offload_clients and node.participates(node.chain.height):
                worker = nodes[offload_clients[i]]
                job_id = node.request_offload(worker.endpoint, float(network.tick))
                pending_jobs.append((node, job_id))
            else:
                node.client_step(float(network.tick))
        pump(pump_ticks)
        for node, job_id in pending_jobs:
            if job_id is not None:
                node.collect_offload(job_id, float(network.tick))
        if pending_jobs:
            pump(pump_ticks)
        for node in nodes:
            node.miner_step(float(network.tick))
        pump(pump_ticks)
        acc = round(evaluate(model, global_model(nodes[0].chain), full_data), 6)
        accuracy.append(acc)
        trace.append({"event": "accuracy", "round": round_index, "value": acc, "tick": network.tick})

    # quiesce: five intervals of pull-based anti-entropy so stragglers catch up
    for sweep in range(5):
        for i, node in enumerate(nodes):
            peers = node.peers.active(float(network.tick))
            if peers:
                node.request_resync(peers[(sweep + i) % len(peers)])
        pump(2 * pump_ticks)

    tips = [node.chain.tip.hash.hex() for node in nodes]
    for i, node in enumerate(nodes):
        trace.append(
            {
                "event": "final",
                "node": i,
                "tip": tips[i],
                "height": node.chain.height,
                "tick": network.tick,
            }
        )
    summary = {
        "nodes": n_nodes,
        "rounds": n_rounds,
        "seed": sim.seed,
        "drop_probability": sim.drop_probability,
        "tips": tips,
        "heights": [node.chain.height for node in nodes],
        "converged": len(set(tips)) == 1,
        "accuracy": accuracy,
    }
    if trace_path is not None:
        with open(trace_path, "w", encoding="utf-8") as fh:
            for event in trace:
                fh.write(json.dumps(event, sort_keys=True) + "\n")
    if summary_path is not None:
        Path(summary_path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return summary


def summarize_trace(trace_path) -> dict:
    """Rebuild a simulation summary from its trace file alone."""
    config = None
    accuracy: dict[int, float] = {}
    finals: dict[int, tuple] = {}
    with open(trace_path, encoding="utf-8") as fh:
        for line in fh:
            event = json.loads(line)
            kind = event.get("event")
            if kind == "config":
                config = event
            elif kind == "accuracy":
                accuracy[event["round"]] = event["value"]
            elif kind == "final":
                finals[event["node"]] = (event["tip"], event["height"])
    if config is None:
        raise ValueError("trace has no config event")
    if len(finals) != config["nodes"] or len(accuracy) != config["rounds"]:
        raise ValueError("trace is incomplete")
    tips = [finals[i][0] for i in range(config["nodes"])]
    return {
        "nodes": config["nodes"],
        "rounds": config["rounds"],
        "seed": config["seed"],
        "drop_probability": config["drop_probability"],
        "tips": tips,
        "heights": [finals[i][1] for i in range(config["nodes"])],
        "converged": len(set(tips)) == 1,
        "accuracy": [accuracy[i] for i in range(config["rounds"])],
    }


# --- long-running UDP node ---------------------------------------------------


class UdpNodeRunner:
    """Real-transport node: receiver threads feed one ordered event queue."""

    def __init__(self, config: NodeConfig):
        self.config = config
        self.sync = UdpTransport(config.host, config.sync_port)
        self.bcast = UdpTransport(config.host, config.broadcast_port)
        genesis = make_genesis(config.model, CompactTarget(config.initial_target_bits))
        chain = None
        if config.chain_path and Path(config.chain_path).exists():
            chain = recover(config.chain_path, genesis, config.desired_block_interval)
        bridge = BridgeListener(port=config.bridge_port) if config.bridge_port else None
        self.node = Node(
            config,
            sync_channel=self.sync,
            bcast_channel=self.bcast,
            chain=chain,
            bridge=bridge,
        )
        self._queue: queue.Queue = queue.Queue()
        self._stop = threading.Event()
        self._threads = []

    def _receive_loop(self, transport, channel: str):
        while not self._stop.is_set():
            got = transport.receive(0.2)
            if got is not None:
                self._queue.put((channel, got[0], got[1]))

    def start(self):
        for transport, channel in ((self.sync, "sync"), (self.bcast, "bcast")):
            thread = threading.Thread(target=self._receive_loop, args=(transport, channel), daemon=True)
            thread.start()
            self._threads.append(thread)
        if self.config.peer:
            chain, peers = bootstrap(
                self.sync,
                self.config.peer,
                self.node.genesis,
                self.node.endpoint,
                self.config.desired_block_interval,
                peer_table=self.node.peers,
            )
            if choose_chain(self.node.chain, chain) is chain:
                self.node._adopt(chain, time.time(), origin="bootstrap")
            self.node.peers.touch(self.config.peer, time.time())
            for ep in peers:
                if ep != self.node.endpoint:
                    self.node.peers.touch(ep, time.time())

    def stop(self):
        self._stop.set()

    def run(self) -> int:
        interval = self.config.desired_block_interval
        next_round = time.monotonic() + interval
        try:
            while not self._stop.is_set():
                if self.node.bridge is not None:
                    self.node.bridge.poll_accept()
                timeout = max(next_round - time.monotonic(), 0.0)
                try:
                    channel, source, data = self._queue.get(timeout=min(timeout, 0.2))
                except queue.Empty:
                    pass
                else:
                    if channel == "sync":
                        self.node.handle_sync(source, data, time.time())
                    else:
                        self.node.handle_broadcast(source, data, time.time())
                if time.monotonic() >= next_round:
                    report = self.node.run_round(time.time())
                    log.info("round report: %s", report)
                    next_round += interval
        except KeyboardInterrupt:
            pass
        finally:
            self.stop()
            for thread in self._threads:
                thread.join(1.0)
            if self.config.chain_path:
                save_chain(self.node.chain, self.config.chain_path)
            if self.node.bridge is not None:
                self.node.bridge.close()
            self.sync.close()
            self.bcast.close()
        return 0
