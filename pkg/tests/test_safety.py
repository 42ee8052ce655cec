"""Seeded whole-cluster runs under loss, duplication, reordering and crashes."""
import random
from dataclasses import replace

import pytest

from config import EngineConfig
from harness import (ALGORITHMS, ClusterMonitor, SimCluster, collision_sweep, engine_config, generate_load,
                     run_point, schedule_load, sign_test, spearman)
from models import Command, NOOP_DIGEST

MS = 1_000_000
SIZES = (4, 5, 7)


def wire_trace(config, n, seed):
    cluster = SimCluster(n, config, seed=seed, record_trace=True)
    schedule_load(cluster, generate_load(200, n, 0.1, seed))
    cluster.run(300 * MS)
    return [(e.time, e.kind, e.port, e.src, e.data) for e in cluster.net.trace]


@pytest.mark.parametrize('seed', range(100))
def test_classic_only_engine_matches_paxos_trace(seed):
    n = SIZES[seed % 3]
    loss = 0.05 if seed % 4 == 0 else 0.0
    paxos = engine_config('paxos', loss_prob=loss)
    classic_only = replace(engine_config('fast-large', loss_prob=loss), fast_rounds=False)
    assert wire_trace(paxos, n, seed) == wire_trace(classic_only, n, seed)


class DeliveryOrder(ClusterMonitor):
    """Keeps the batches r0 delivers, in order."""

    def __init__(self):
        super().__init__()
        self.order = []

    def delivered(self, replica, instance, batch, tickets, now):
        super().delivered(replica, instance, batch, tickets, now)
        if replica == 0:
            self.order.append(batch.commands)


def decision_sequence(config, switch_at=None):
    monitor = DeliveryOrder()
    cluster = SimCluster(5, config, seed=7, monitor=monitor)
    if switch_at is not None:
        cluster.run(switch_at)
        assert all(rep.acceptor.any_grant is not None for rep in cluster.replicas.values())
        for rep in cluster.replicas.values():
            rep.use_classic_rounds()
    tickets = []
    for i in range(40):
        at = 150 * MS + i * 4 * MS
        cluster.at(at, lambda i=i: tickets.append(cluster.submit(1 + i % 4, Command(i, 'c%04d' % i))))
    cluster.run(800 * MS)
    assert all(t.done for t in tickets)
    assert monitor.violations == []
    decided = [d for _, d in sorted(monitor.decisions.items()) if d != NOOP_DIGEST]
    return monitor.order, decided


def test_fast_engine_switched_to_classic_decides_like_paxos():
    paxos = decision_sequence(engine_config('paxos'))
    switched = decision_sequence(engine_config('fast-large'), switch_at=100 * MS)
    assert len(paxos[0]) > 0
    assert switched == paxos


@pytest.mark.parametrize('seed', range(1000))
def test_no_safety_violations(seed):
    rng = random.Random(seed)
    n = SIZES[seed % 3]
    algorithm = sorted(ALGORITHMS)[seed % len(ALGORITHMS)]
    config = engine_config(algorithm, loss_prob=round(rng.uniform(0.0, 0.2), 3), duplicate_prob=0.05,
                           reorder_jitter_us=rng.choice([20.0, 100.0, 300.0]))
    cluster = SimCluster(n, config, seed=seed)
    schedule_load(cluster, generate_load(100, n, 0.1, seed))
    if seed % 2:
        victim = rng.randrange(n)
        kill_at = rng.randrange(20, 200) * MS
        cluster.at(kill_at, lambda: cluster.kill(victim))
        cluster.at(kill_at + rng.randrange(10, 100) * MS, lambda: cluster.restart(victim))
    cluster.run(400 * MS)

    assert cluster.monitor.violations == []
    by_watermark = {}
    for rep in cluster.replicas.values():
        by_watermark.setdefault(rep.window.delivered, set()).add(rep.state_digest())
    assert all(len(digests) == 1 for digests in by_watermark.values())


# --- Collisions ---
def test_classic_runs_never_collide():
    for algorithm in ('paxos', 'paxos-big-quorum'):
        for seed in range(3):
            config = engine_config(algorithm, reorder_jitter_us=300.0)
            result = run_point(config, 5, 400, 0.3, seed, algorithm, drain_s=0.3, bucket_s=0.3)
            assert result.summary['collisions'] == 0
            assert result.cluster.monitor.violations == []


def test_collision_fraction_rises_with_rate():
    # slow links and jitter make concurrent fast proposals overlap
    config = EngineConfig(link_latency_us=1000.0, reorder_jitter_us=500.0)
    frame = collision_sweep([25, 50, 100, 200, 400], range(20), replicas=5, duration_s=0.3, config=config)
    assert len(frame) == 100
    assert spearman(frame['rate'], frame['collision_fraction']) > 0
    assert (frame['collisions'] <= frame['retried_inst']).all()
    per_rate = frame.groupby('rate')['collision_fraction'].mean()
    assert per_rate.loc[400] >= per_rate.loc[25]


def test_fast_rounds_retry_more_under_loss():
    pairs = []
    for seed in range(24):
        ratios = []
        for algorithm in ('fast-large', 'paxos'):
            config = engine_config(algorithm, loss_prob=0.05)
            result = run_point(config, 7, 200, 0.5, seed, algorithm, drain_s=0.5, bucket_s=0.5)
            assert result.cluster.monitor.violations == []
            ratios.append(result.summary['retried_ratio'])
        pairs.append(tuple(ratios))
    assert sign_test(pairs) < 0.05
