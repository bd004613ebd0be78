"""Shared fixtures: tiny models, instant-mining targets, canned chains."""

import numpy as np

from fedchain.chain import (
    Block,
    BlockHeader,
    Chain,
    CompactTarget,
    compress_target,
    make_genesis,
    merkle_root,
    mine,
)
from fedchain.fedavg import aggregate
from fedchain.params import ModelConfig, ModelUpdate, ParameterVector

# expands past 2^256, so every hash qualifies: instant mining in fixtures
EASY = CompactTarget(0x23FFFFFF)
# below 2^256 so each block carries positive work (1 in 64 hashes qualify)
WORKED = compress_target(1 << 250)
MODEL = ModelConfig((2, 2), seed=0)


def update(client, count, values, round=0):
    cid = bytes([client]) * 20
    return ModelUpdate(cid, count, ParameterVector(np.asarray(values, dtype=np.float64)), round)


def mined_block(parent, updates, target=EASY, timestamp=None):
    agg = aggregate(updates).params
    ts = parent.header.timestamp + 2 if timestamp is None else timestamp
    template = BlockHeader(1, parent.hash, merkle_root(updates), ts, target, 0)
    header = mine(template, 10_000_000)
    assert header is not None
    return Block(header, tuple(updates), agg, parent.height + 1)


def build_chain(n_blocks, target=EASY, seed=1, model=MODEL):
    chain = Chain([make_genesis(model, target)])
    for i in range(n_blocks):
        ups = [update((seed + i) % 250 + 1, i + 1, [float(i), float(-i)])]
        chain = chain.extend(mined_block(chain.tip, ups, target=target))
    return chain
