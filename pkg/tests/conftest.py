import pytest

from config import EngineConfig
from harness import SimCluster, engine_config
from utils import clear_activity

MS = 1_000_000


@pytest.fixture(autouse=True)
def _fresh_activity():
    clear_activity()
    yield
    clear_activity()


@pytest.fixture
def make_cluster():
    """Builds a simulated cluster: make_cluster(n, algorithm='paxos', seed=0, **engine overrides)."""
    def build(n, algorithm='paxos', seed=0, record_trace=False, **overrides):
        config = engine_config(algorithm, EngineConfig(), **overrides)
        return SimCluster(n, config, seed=seed, record_trace=record_trace)
    return build


@pytest.fixture
def unit_latency():
    """One millisecond links, no serialization cost, a flush per event."""
    return {'link_latency_us': 1000.0, 'serialization_us': 0.0, 'group_commit_ms': 0.0}


class Filtered:
    """Sits between the network and a replica; messages `drop(message, dst)` matches never arrive."""

    def __init__(self, replica, me, drop):
        self.replica = replica
        self.me = me
        self.drop = drop

    def on_message(self, m):
        if not self.drop(m, self.me):
            self.replica.on_message(m)

    def on_timer(self, tag):
        self.replica.on_timer(tag)


@pytest.fixture
def drop_messages():
    """drop_messages(cluster, drop) filters every replica's inbound messages."""
    def install(cluster, drop):
        for r in cluster.members:
            cluster.net.handlers[r] = Filtered(cluster.replicas[r], r, drop)
    return install
