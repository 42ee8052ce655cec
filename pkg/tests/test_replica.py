import pytest

from models import Command, MessageKind
from replica import FAILED, RECOVERING, ReplicaUnavailable
from sequencer import BackpressureError, theoretical_delay

MS = 1_000_000


def submit_at(cluster, at_ns, replica, command, tickets):
    cluster.at(at_ns, lambda: tickets.append(cluster.submit(replica, command)))


# --- Latency steps ---
@pytest.mark.parametrize('algorithm, n, mode', [
    ('paxos', 4, 'classic'),
    ('paxos', 5, 'classic'),
    ('paxos-big-quorum', 5, 'classic'),
    ('fast-small', 5, 'fast'),
    ('fast-large', 4, 'fast'),
])
def test_first_decision_after_message_delays(make_cluster, unit_latency, algorithm, n, mode):
    cluster = make_cluster(n, algorithm, **unit_latency)
    tickets = []
    submit_at(cluster, 10 * MS, 1, Command(1, 'abcde'), tickets)
    cluster.run(60 * MS)

    monitor = cluster.monitor
    assert monitor.proposals[0][3] == 10 * MS
    first = min(monitor.first_decided.values())
    assert first - 10 * MS == theoretical_delay(mode) * MS
    assert tickets[0].done
    assert monitor.violations == []


def test_every_replica_applies_the_same_puts(make_cluster):
    cluster = make_cluster(3)
    tickets = []
    for i in range(30):
        submit_at(cluster, 5 * MS + i * MS, i % 3, Command(i % 7, 'v%04d' % i), tickets)
    cluster.run(500 * MS)
    assert all(t.done for t in tickets)
    digests = set(cluster.digests().values())
    assert len(digests) == 1
    assert len({rep.read(6) for rep in cluster.replicas.values()}) == 1
    assert cluster.replicas[0].read(6) in {'v0006', 'v0013', 'v0020', 'v0027'}
    assert all(rep.table.applied_count == 30 for rep in cluster.replicas.values())


# --- Failures ---
def test_coordinator_failover(make_cluster):
    cluster = make_cluster(3)
    tickets = []
    cluster.at(100 * MS, lambda: cluster.kill(0))
    submit_at(cluster, 120 * MS, 1, Command(1, 'after'), tickets)
    cluster.run(2000 * MS)
    assert tickets[0].done
    assert cluster.coordinator() == 1
    assert cluster.replicas[2].read(1) == 'after'
    assert cluster.monitor.violations == []


def test_submit_to_dead_replica_is_refused(make_cluster):
    cluster = make_cluster(3)
    cluster.run(10 * MS)
    cluster.kill(2)
    with pytest.raises(ReplicaUnavailable):
        cluster.submit(2, Command(1, 'abcde'))


def test_restarted_replica_recovers_and_catches_up(make_cluster):
    cluster = make_cluster(3)
    tickets = []
    for i in range(20):
        submit_at(cluster, 5 * MS + i * 10 * MS, 0, Command(i, 'early'), tickets)
    cluster.at(60 * MS, lambda: cluster.kill(2))
    cluster.at(150 * MS, lambda: cluster.restart(2))
    for i in range(20, 30):
        submit_at(cluster, 400 * MS + i * MS, 1, Command(i, 'later'), tickets)
    cluster.run(300 * MS)
    assert cluster.replicas[2].incarnation == 2
    cluster.run(2000 * MS)

    assert all(t.done for t in tickets)
    assert cluster.replicas[2].running
    assert not cluster.replicas[2].rejoining
    digests = cluster.digests()
    assert set(digests) == {0, 1, 2}
    assert len(set(digests.values())) == 1
    assert cluster.monitor.recoveries and cluster.monitor.recoveries[0][0] == 2


def test_recovering_replica_refuses_commands(make_cluster):
    cluster = make_cluster(3, recover_record_us=10_000.0)
    cluster.run(20 * MS)
    cluster.kill(1)
    fresh = cluster.restart(1)
    assert fresh.status == RECOVERING
    with pytest.raises(ReplicaUnavailable):
        fresh.submit(Command(1, 'abcde'))


def test_pending_commands_are_lost_at_a_crash(make_cluster):
    cluster = make_cluster(3)
    tickets = []
    submit_at(cluster, 10 * MS, 2, Command(1, 'abcde'), tickets)
    cluster.at(10 * MS, lambda: cluster.kill(2), port=99)
    cluster.run(200 * MS)
    assert tickets[0].lost and not tickets[0].done


def test_storage_failure_halts_only_that_replica(make_cluster):
    cluster = make_cluster(3)
    tickets = []
    cluster.run(10 * MS)
    cluster.storages[1].fail = True
    submit_at(cluster, 20 * MS, 1, Command(1, 'abcde'), tickets)
    submit_at(cluster, 30 * MS, 0, Command(2, 'fghij'), tickets)
    cluster.run(300 * MS)
    assert cluster.replicas[1].status == FAILED
    assert tickets[0].lost
    assert tickets[1].done
    assert cluster.replicas[2].read(2) == 'fghij'


def test_backpressure_at_the_pending_bound(make_cluster):
    cluster = make_cluster(3, pending_bound=2, max_batch_bytes=28)
    cluster.run(10 * MS)
    cluster.submit(1, Command(1, 'abcde'))
    cluster.submit(1, Command(2, 'abcde'))
    with pytest.raises(BackpressureError):
        cluster.submit(1, Command(3, 'abcde'))


def test_status_dict(make_cluster):
    cluster = make_cluster(3)
    cluster.run(20 * MS)
    status = cluster.replicas[0].status_dict()
    assert status['coordinator'] == 0 and status['coordinating']
    assert status['status'] == 'running'
    assert status['counters']['retried_instances'] == 0


def test_reads_leave_the_wire_untouched(make_cluster):
    def run(with_reads):
        cluster = make_cluster(3, record_trace=True)
        tickets = []
        for i in range(12):
            submit_at(cluster, 5 * MS + i * 3 * MS, i % 3, Command(i, 'v%04d' % i), tickets)
        if with_reads:
            for t in range(4, 80, 7):
                cluster.at(t * MS, lambda: [rep.read(k) for rep in cluster.replicas.values() for k in range(12)])
        cluster.run(200 * MS)
        assert all(t.done for t in tickets)
        return cluster.net

    quiet, reading = run(False), run(True)
    assert reading.copies_enqueued == quiet.copies_enqueued
    assert reading.bytes_on_wire == quiet.bytes_on_wire
    assert [(e.time, e.kind, e.port, e.data) for e in reading.trace] == \
        [(e.time, e.kind, e.port, e.data) for e in quiet.trace]


# --- Rejoining ---
def test_restarted_replica_refuses_until_caught_up(make_cluster):
    cluster = make_cluster(3)
    tickets = []
    for i in range(40):
        submit_at(cluster, 5 * MS + i * 5 * MS, 0, Command(i, 'early'), tickets)
    cluster.at(20 * MS, lambda: cluster.kill(2))
    cluster.run(250 * MS)
    fresh = cluster.restart(2)
    cluster.net.run(stop=lambda: fresh.running)
    assert fresh.rejoining
    assert fresh.status_dict()['rejoining']
    with pytest.raises(ReplicaUnavailable, match='catching up'):
        fresh.submit(Command(99, 'abcde'))

    cluster.run_for(500 * MS)
    assert not fresh.rejoining
    assert fresh.window.delivered == cluster.replicas[0].window.delivered
    late = fresh.submit(Command(100, 'fghij'))
    cluster.run_for(200 * MS)
    assert late.done
    assert len(set(cluster.digests().values())) == 1


def test_lower_id_rejoining_keeps_the_coordinator(make_cluster):
    cluster = make_cluster(5)
    tickets = []
    cluster.at(50 * MS, lambda: cluster.kill(0))
    cluster.at(800 * MS, lambda: cluster.restart(0))
    for i in range(10):
        submit_at(cluster, 1200 * MS + i * 10 * MS, i % 5, Command(i, 'after'), tickets)
    cluster.run(2000 * MS)
    assert all(t.done for t in tickets)
    assert cluster.coordinator() == 1
    assert {rep.coordinator for rep in cluster.replicas.values()} == {1}
    assert cluster.replicas[0].coord.round is None
    assert cluster.monitor.violations == []


# --- Retries ---
def test_stalled_fast_instance_takes_one_recovery_round(make_cluster, drop_messages):
    cluster = make_cluster(7, 'fast-large')
    cluster.run(100 * MS)
    # every first-round vote is lost; the coordinator's recovery round is not
    drop_messages(cluster, lambda m, dst: m.kind == MessageKind.PHASE2B and cluster.now < 160 * MS)
    tickets = []
    submit_at(cluster, 101 * MS, 3, Command(1, 'abcde'), tickets)
    cluster.run(400 * MS)

    assert tickets[0].done
    replicas = cluster.replicas.values()
    assert sum(rep.counters.alerts_sent for rep in replicas) == 6
    assert cluster.replicas[0].counters.alerts_received == 6
    assert sum(rep.counters.recovery_rounds for rep in replicas) == 1
    assert cluster.monitor.counters.retried_instances == 1
    assert cluster.monitor.counters.collisions == 0
    assert cluster.monitor.violations == []


def test_split_fast_round_counts_as_a_collision(make_cluster, drop_messages):
    cluster = make_cluster(5, 'fast-small')
    cluster.run(100 * MS)
    rep = cluster.replicas[1]
    target = max(rep.acceptor.any_grant[0], rep.window.delivered, rep.learner.highest_seen + 1)
    # r1's proposal reaches r0 only, r3's reaches r2 and r4: two votes against three
    blocked = {(1, 2), (1, 4), (3, 0)}
    drop_messages(cluster, lambda m, dst: (m.kind == MessageKind.PROPOSE and m.instance == target
                                           and (m.sender, dst) in blocked))
    tickets = []
    submit_at(cluster, 101 * MS, 1, Command(1, 'abcde'), tickets)
    submit_at(cluster, 101 * MS, 3, Command(2, 'fghij'), tickets)
    cluster.run(400 * MS)

    assert all(t.done for t in tickets)
    counters = cluster.monitor.counters
    assert (counters.retried_instances, counters.collisions) == (1, 1)
    assert sum(r.counters.recovery_rounds for r in cluster.replicas.values()) == 1
    assert len(set(cluster.digests().values())) == 1
    assert cluster.monitor.violations == []
