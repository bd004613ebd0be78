"""End-to-end against a real node: the trainer subprocess serves bridge
requests while the node runs federated rounds.

Requires the node package; skipped cleanly where only this package is
installed.
"""

import subprocess
import sys
import time

import numpy as np
import pytest

pytest.importorskip("fedchain")

from fedchain.bridge import BridgeListener, BridgeRequest  # noqa: E402
from fedchain.chain import global_model, validate_chain  # noqa: E402
from fedchain.node import Node, NodeConfig  # noqa: E402
from fedchain.params import ModelConfig  # noqa: E402
from fedchain.trainer import (  # noqa: E402
    TrainSpec,
    evaluate,
    init_params,
    save_csv,
    synthetic_blobs,
)


class NullChannel:
    def send(self, endpoint, data):
        pass


@pytest.fixture(scope="module")
def trainer():
    listener = BridgeListener(port=0)
    proc = subprocess.Popen(
        [sys.executable, "-m", "bridge_trainer", "--endpoint", f"127.0.0.1:{listener.port}"],
        stdout=subprocess.PIPE,
        stderr=subprocess.PIPE,
    )
    deadline = time.monotonic() + 60.0
    while not listener.connected and time.monotonic() < deadline:
        if proc.poll() is not None:
            pytest.fail(f"trainer exited early: {proc.communicate()[1].decode()}")
        listener.poll_accept()
        time.sleep(0.05)
    if not listener.connected:
        proc.kill()
        proc.communicate()
        pytest.fail("trainer never connected")
    yield listener
    proc.terminate()
    proc.communicate(timeout=10)
    listener.close()


def test_three_rounds_over_the_bridge_lr_zero(trainer, tmp_path):
    model = ModelConfig((4, 10, 3), seed=2)
    data = synthetic_blobs(96, 4, 3, seed=11)
    shard = tmp_path / "shard.csv"
    save_csv(data, shard)
    config = NodeConfig(
        roles=frozenset({"client", "miner"}),
        model=model,
        train=TrainSpec(epochs=1, batch_size=8, learning_rate=0.0, seed=3),
        dataset_path=str(shard),
        desired_block_interval=8.0,
        initial_target_bits=0x21FFFFFF,
    )
    events = []
    node = Node(
        config,
        sync_channel=NullChannel(),
        bcast_channel=NullChannel(),
        bridge=trainer,
        on_event=events.append,
    )

    for round_index in range(3):
        before = global_model(node.chain).values.copy()
        assert node.client_step(float(round_index)) is not None
        trained = [e for e in events if e.get("event") == "train" and e.get("round") == round_index]
        assert trained and trained[-1]["via"] == "bridge"
        assert node.miner_step(float(round_index)) is not None
        assert node.chain.height == round_index + 1
        # lr=0: the externally trained update is the start params modulo
        # one float64 -> float32 -> float64 round trip
        after = node.chain.tip.aggregate.values
        assert np.max(np.abs(after - before)) < 1e-6

    assert validate_chain(node.chain, node.genesis, config.desired_block_interval) == []


def test_bridge_training_improves_accuracy(trainer, tmp_path):
    model = ModelConfig((4, 12, 3), seed=5)
    data = synthetic_blobs(160, 4, 3, seed=21, center_spread=3.0, cluster_std=0.5)
    shard = tmp_path / "train.csv"
    save_csv(data, shard)
    start = init_params(model)
    request = BridgeRequest(
        job_id=bytes(16),
        client_id=bytes(range(20)),
        round=0,
        model=model,
        start_params=start,
        spec=TrainSpec(epochs=5, batch_size=16, learning_rate=0.1, seed=7),
        data_ref=str(shard),
    )
    update = trainer.request_train(request, 160)
    assert update is not None
    assert update.sample_count == 160
    assert evaluate(model, update.params, data) > evaluate(model, start, data)
