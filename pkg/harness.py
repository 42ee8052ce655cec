"""
Benchmark harness: provisions a cluster, drives fixed-rate put load through
it, injects failures and turns what happened into per-second metrics and
per-run summaries.

Two cluster kinds share the same experiment code. SimCluster runs every
replica in-process on the simulated switch; RealCluster starts one app.py
process per replica and talks to them over HTTP.
"""
import logging
import math
import os
import random
import string
import subprocess
import sys
import threading
import time
from dataclasses import dataclass, field, fields, replace
from functools import partial
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import pandas as pd
import requests

from config import EngineConfig
from ledger import MemoryStorage
from liveness import RetryCounters, record_retry
from models import Command, NOOP_DIGEST, ReplicaId, RoundKind
from quorums import smallest_cluster
from replica import Replica, ReplicaObserver, ReplicaUnavailable
from sequencer import BackpressureError
from transport import SimNetConfig, SimNetwork
from utils import log_activity, ns_to_ms

logger = logging.getLogger(__name__)

ALGORITHMS = {
    'paxos': ('classic', False),
    'fast-large': ('fast-large', True),
    'fast-small': ('fast-uniform', True),
    'paxos-big-quorum': ('fast-uniform', False),
}
EXPERIMENTS = ('scaleup', 'speedup', 'quorumsize', 'retries', 'failure')
COORDINATOR = 'coordinator'
NON_COORDINATOR = 'non-coordinator'

CSV_COLUMNS = ['bucket_s', 'served_ops', 'mean_rt_ms', 'total_inst', 'retried_inst', 'collisions', 'bytes']
SUMMARY_COLUMNS = ['algorithm', 'replicas', 'rate', 'served_ops', 'mean_rt_ms', 'retried_ratio',
                   'collision_ratio', 'peak_served', 'total_inst', 'partial_conflicts']

NS_PER_S = 1_000_000_000
KEY_STRIDE = 1_000_000_000
STEADY_TRIM = 0.1
# per-replica settings RealCluster sets itself
NODE_KEYS = ('transport', 'bind', 'peers', 'data_dir')

# Desk-scale sweep defaults per experiment
EXPERIMENT_DEFAULTS: Dict[str, Dict[str, object]] = {
    'scaleup': {'replicas': [3, 4, 5, 6, 7, 8, 9], 'rates': [200.0]},
    'speedup': {'replicas': [5], 'rates': [50.0, 100.0, 200.0, 400.0, 800.0, 1600.0]},
    'quorumsize': {'algorithm': 'paxos-big-quorum', 'replicas': [3, 4, 5, 6, 7, 8, 9], 'rates': [200.0]},
    'retries': {'replicas': [7], 'rates': [200.0], 'overrides': {'loss_prob': 0.05}},
    'failure': {'replicas': [5], 'rates': [200.0], 'duration_s': 20.0,
                'failure_target': NON_COORDINATOR, 'failure_at_s': 8.0, 'restart_after_s': 0.5,
                'overrides': {'election_timeout_ms': 150.0}},
}


class HarnessError(RuntimeError):
    """A sweep point could not be run."""


def engine_config(algorithm: str, base: Optional[EngineConfig] = None, **overrides) -> EngineConfig:
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}; choose from {sorted(ALGORITHMS)}")
    variant, fast = ALGORITHMS[algorithm]
    return replace(base or EngineConfig(), quorum_variant=variant, fast_rounds=fast, **overrides)


@dataclass
class ExperimentSpec:
    name: str
    algorithm: str = 'paxos'
    replicas: List[int] = field(default_factory=lambda: [5])
    rates: List[float] = field(default_factory=lambda: [200.0])
    duration_s: float = 10.0
    seed: int = 0
    transport: str = 'sim'
    generators: Optional[int] = None
    max_outstanding: Optional[int] = None
    failure_target: Optional[str] = None
    failure_at_s: Optional[float] = None
    restart_after_s: Optional[float] = 0.5
    drain_s: float = 1.0
    bucket_s: float = 1.0
    overrides: Dict[str, object] = field(default_factory=dict)
    config: EngineConfig = field(default_factory=EngineConfig)

    def __post_init__(self):
        if self.name not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.name!r}; choose from {EXPERIMENTS}")
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.transport not in ('sim', 'udp'):
            raise ValueError(f"unknown transport {self.transport!r}")
        if not self.replicas or not self.rates:
            raise ValueError("at least one replica count and one rate are required")
        if self.name == 'scaleup' and len(self.rates) != 1:
            raise ValueError("scaleup fixes the load rate and sweeps replicas")
        if self.name == 'speedup' and len(self.replicas) != 1:
            raise ValueError("speedup fixes the replica count and sweeps load rates")
        if self.failure_target not in (None, COORDINATOR, NON_COORDINATOR):
            raise ValueError(f"unknown failure target {self.failure_target!r}")

    @classmethod
    def defaults(cls, name: str, **overrides) -> 'ExperimentSpec':
        """
        The desk-scale defaults of an experiment, with explicit values on
        top. Default replica counts the algorithm cannot run are dropped.
        """
        if name not in EXPERIMENT_DEFAULTS:
            raise ValueError(f"unknown experiment {name!r}; choose from {EXPERIMENTS}")
        values = dict(EXPERIMENT_DEFAULTS[name])
        values.update({k: v for k, v in overrides.items() if v is not None})
        if overrides.get('replicas') is None:
            floor = smallest_cluster(ALGORITHMS.get(values.get('algorithm', 'paxos'), ('classic',))[0])
            values['replicas'] = [n for n in values['replicas'] if n >= floor]
        return cls(name=name, **values)

    def point_config(self, algorithm: str) -> EngineConfig:
        base = EngineConfig.from_mapping(self.overrides, self.config) if self.overrides else self.config
        return engine_config(algorithm, base, transport=self.transport)


def parse_span(text: str, kind=int, doubling: bool = False) -> List:
    """
    "7" -> [7]; "4,8,16" -> [4, 8, 16]; "4..9" -> 4, 5, ... 9. With
    doubling, "100..800" -> 100, 200, 400, 800.
    """
    text = str(text).strip()
    if ',' in text:
        return [kind(part) for part in text.split(',') if part.strip()]
    if '..' not in text:
        return [kind(text)]
    low, high = (kind(part) for part in text.split('..', 1))
    if low > high:
        raise ValueError(f"empty range {text!r}")
    values = []
    current = low
    while current <= high:
        values.append(current)
        current = current * 2 if doubling else current + 1
    if values[-1] != high:
        values.append(high)
    return values


# --- Load ---
@dataclass(frozen=True)
class Arrival:
    time_ns: int
    generator: int
    command: Command


def generate_load(rate: float, generators: int, duration_s: float, seed: int) -> List[Arrival]:
    """
    Open-loop put arrivals: each generator runs at rate/generators with a
    fixed inter-arrival time, a seeded phase and a small seeded jitter.
    """
    if rate <= 0:
        raise ValueError(f"rate must be positive, got {rate}")
    if generators < 1:
        raise ValueError("at least one generator is required")
    rng = random.Random(seed)
    per_generator = rate / generators
    interval_ns = max(1, int(NS_PER_S / per_generator))
    count = int(round(per_generator * duration_s))
    end_ns = max(1, int(duration_s * NS_PER_S))
    arrivals = []
    for g in range(generators):
        phase = rng.randrange(interval_ns)
        for i in range(count):
            jitter = rng.randint(-(interval_ns // 10), interval_ns // 10)
            at = min(max(0, phase + i * interval_ns + jitter), end_ns - 1)
            value = ''.join(rng.choice(string.ascii_lowercase) for _ in range(5))
            arrivals.append(Arrival(at, g, Command(g * KEY_STRIDE + i, value)))
    arrivals.sort(key=lambda a: (a.time_ns, a.generator, a.command.key))
    return arrivals


# --- Observation ---
class ClusterMonitor(ReplicaObserver):
    """
    Cluster-wide bookkeeping fed by every replica: what was proposed, voted
    and decided (with safety checks on each), delivered tickets, retries and
    the offered-load accounting.
    """

    def __init__(self, check_safety: bool = True):
        self.check_safety = check_safety
        self.proposed_digests: Dict[bytes, int] = {}
        self.proposals: List[Tuple[ReplicaId, Optional[int], int, int]] = []
        self.decisions: Dict[int, bytes] = {}
        self.first_decided: Dict[int, int] = {}
        self.votes: Dict[tuple, bytes] = {}
        self.classic_votes: Dict[tuple, bytes] = {}
        self.violations: List[str] = []
        self.counters = RetryCounters()
        self.deliveries: List[Tuple[int, int]] = []
        self.recoveries: List[Tuple[ReplicaId, int]] = []
        self.retry_trace: Dict[int, int] = {}
        self.tickets = []
        self.offered = 0
        self.rejected = 0
        self.lost_arrivals = 0
        self.markers: Optional['FailureMarkers'] = None

    def proposed(self, replica, instance, batch_id, value, now):
        self.proposed_digests.setdefault(value.digest, now)
        self.proposals.append((replica, instance, batch_id, now))

    def voted(self, replica, instance, rnd, digest, now):
        if not self.check_safety:
            return
        key = (replica, instance, rnd.key)
        previous = self.votes.setdefault(key, digest)
        if previous != digest:
            self.violations.append(f"vote uniqueness: r{replica} voted twice in {rnd} for instance {instance}")
        if rnd.kind == RoundKind.CLASSIC:
            previous = self.classic_votes.setdefault((instance, rnd.key), digest)
            if previous != digest:
                self.violations.append(f"vote uniqueness: two values in classic round {rnd} of instance {instance}")

    def decided(self, replica, instance, digest, now):
        known = self.decisions.setdefault(instance, digest)
        self.first_decided.setdefault(instance, now)
        if not self.check_safety:
            return
        if known != digest:
            self.violations.append(f"agreement: instance {instance} decided two values")
        if digest != NOOP_DIGEST and digest not in self.proposed_digests:
            self.violations.append(f"validity: instance {instance} decided a value nobody proposed")

    def delivered(self, replica, instance, batch, tickets, now):
        for t in tickets:
            self.deliveries.append((now, t.response_ns))

    def retried(self, replica, instance, kind, now):
        record_retry(kind, self.counters, instance)
        self.retry_trace.setdefault(instance, now)

    def recovered(self, replica, now):
        self.recoveries.append((replica, now))
        if self.markers is not None and self.markers.replica == replica and self.markers.recovered_ns is None:
            self.markers.recovered_ns = now

    def rejoined(self, replica, now):
        if self.markers is not None and self.markers.replica == replica and self.markers.rejoined_ns is None:
            self.markers.rejoined_ns = now

    def first_try_instances(self) -> int:
        """Decided instances that no replica ever ran a recovery round for."""
        return sum(1 for i in self.first_decided if i not in self.retry_trace)

    # accounting
    def accounting(self) -> Dict[str, int]:
        served = sum(1 for _, t in self.tickets if t.done)
        lost_tickets = sum(1 for _, t in self.tickets if t.lost)
        pending = len(self.tickets) - served - lost_tickets
        return {
            'offered': self.offered,
            'served': served,
            'pending': pending,
            'rejected': self.rejected,
            'lost': self.lost_arrivals + lost_tickets,
        }


def accounting_closes(counts: Dict[str, int]) -> bool:
    return counts['offered'] == counts['served'] + counts['pending'] + counts['rejected'] + counts['lost']


# --- Clusters ---
class SimCluster:
    """Every replica in-process on one simulated switch, each with a simulated disk."""

    def __init__(self, n: int, config: EngineConfig, seed: Optional[int] = None, record_trace: bool = False,
                 monitor: Optional[ClusterMonitor] = None, **net_overrides):
        self.config = config
        self.members = list(range(n))
        overrides = dict(net_overrides, record_trace=record_trace)
        if seed is not None:
            overrides['seed'] = seed
        self.net = SimNetwork(SimNetConfig.from_engine(config, **overrides))
        self.monitor = monitor or ClusterMonitor()
        self.storages = {r: MemoryStorage() for r in self.members}
        self.replicas: Dict[ReplicaId, Replica] = {}
        hosts = {}
        for r in self.members:
            self.replicas[r] = Replica(r, self.members, config, self.storages[r], self.monitor)
            hosts[r] = self.net.attach(r, self.replicas[r])
        for r in self.members:
            self.replicas[r].start(hosts[r])

    @property
    def now(self) -> int:
        return self.net.clock

    def run(self, until_ns: int) -> None:
        self.net.run(until=until_ns)

    def run_for(self, span_ns: int) -> None:
        self.net.run(until=self.net.clock + span_ns)

    def at(self, time_ns: int, fn, port: int = -1) -> None:
        self.net.call_at(time_ns, fn, port)

    def submit(self, replica: ReplicaId, command: Command):
        return self.replicas[replica].submit(command)

    def kill(self, replica: ReplicaId) -> None:
        self.replicas[replica].crash()
        self.net.kill(replica)
        self.storages[replica].crash()

    def restart(self, replica: ReplicaId, storage: Optional[MemoryStorage] = None) -> Replica:
        if storage is not None:
            self.storages[replica] = storage
        fresh = Replica(replica, self.members, self.config, self.storages[replica], self.monitor)
        self.replicas[replica] = fresh
        fresh.start(self.net.revive(replica, fresh))
        return fresh

    def running(self) -> List[ReplicaId]:
        return [r for r, rep in sorted(self.replicas.items()) if rep.running]

    def coordinator(self) -> Optional[ReplicaId]:
        active = [(rep.coord.round, r) for r, rep in self.replicas.items() if rep.running and rep.coord.active]
        if active:
            return max(active)[1]
        running = self.running()
        return running[0] if running else None

    def pick(self, target: str) -> ReplicaId:
        coordinator = self.coordinator()
        if target == COORDINATOR:
            return coordinator
        others = [r for r in self.running() if r != coordinator]
        if not others:
            raise HarnessError("no non-coordinator replica is running")
        return max(others)

    def digests(self) -> Dict[ReplicaId, bytes]:
        return {r: rep.state_digest() for r, rep in self.replicas.items() if rep.running}

    def bytes_on_wire(self) -> int:
        return self.net.bytes_on_wire

    def partial_conflicts(self) -> int:
        return max((rep.learner.partial_conflicts for rep in self.replicas.values()), default=0)


@dataclass
class FailureMarkers:
    """
    The instants a failure plot marks: the kill, the restart, the end of
    local recovery and the end of catch-up, when the replica takes commands
    again.
    """
    target: str
    replica: Optional[ReplicaId] = None
    killed_ns: Optional[int] = None
    restarted_ns: Optional[int] = None
    recovered_ns: Optional[int] = None
    rejoined_ns: Optional[int] = None


def inject_failure(cluster: SimCluster, target: str, at_ns: int,
                   restart_after_ns: Optional[int]) -> FailureMarkers:
    """Kills the chosen replica at `at_ns`; restarts it after the delay unless that is None."""
    if target not in (COORDINATOR, NON_COORDINATOR):
        raise ValueError(f"unknown failure target {target!r}")
    markers = FailureMarkers(target)
    cluster.monitor.markers = markers

    def restart():
        markers.restarted_ns = cluster.now
        cluster.restart(markers.replica)

    def kill():
        markers.replica = cluster.pick(target)
        markers.killed_ns = cluster.now
        log_activity('warning', "Injected failure", replica=markers.replica, target=target, at_ns=cluster.now)
        cluster.kill(markers.replica)
        if restart_after_ns is not None:
            cluster.at(cluster.now + restart_after_ns, restart)

    cluster.at(at_ns, kill)
    return markers


def schedule_load(cluster: SimCluster, arrivals: Iterable[Arrival], max_outstanding: Optional[int] = None) -> None:
    """
    Generator g feeds replica g mod N. While that replica is down its
    generator fails over to the next running replica in ring order; a
    replica that is back but still catching up refuses, and those arrivals
    are lost.
    """
    monitor = cluster.monitor
    n = len(cluster.members)
    outstanding: Dict[int, List] = {}

    def home(generator: int) -> ReplicaId:
        first = generator % n
        if cluster.net.alive.get(first):
            return first
        for step in range(1, n):
            r = (first + step) % n
            rep = cluster.replicas[r]
            if rep.running and not rep.rejoining:
                return r
        return first

    def arrive(a: Arrival):
        monitor.offered += 1
        replica = cluster.replicas[home(a.generator)]
        if max_outstanding is not None:
            live = [t for t in outstanding.get(a.generator, []) if not (t.done or t.lost)]
            outstanding[a.generator] = live
            if len(live) >= max_outstanding:
                monitor.rejected += 1
                return
        try:
            ticket = replica.submit(a.command)
        except BackpressureError:
            monitor.rejected += 1
            return
        except ReplicaUnavailable:
            monitor.lost_arrivals += 1
            return
        monitor.tickets.append((a.generator, ticket))
        outstanding.setdefault(a.generator, []).append(ticket)

    for a in arrivals:
        cluster.at(a.time_ns, partial(arrive, a), port=a.generator % n)


# --- Metrics ---
def build_rows(deliveries: Sequence[Tuple[int, int]], samples: Sequence[Dict[str, int]], bucket_ns: int) -> pd.DataFrame:
    """One row per bucket: served rate and mean response time of the bucket, cumulative counters at its end."""
    frame = pd.DataFrame(list(deliveries), columns=['at_ns', 'response_ns'], dtype='int64')
    frame['bucket'] = frame['at_ns'] // bucket_ns
    per_bucket = frame.groupby('bucket')['response_ns'].agg(['count', 'mean'])
    bucket_s = bucket_ns / NS_PER_S
    rows = []
    for index, sample in enumerate(samples):
        served = int(per_bucket['count'].get(index, 0))
        mean_rt = float(per_bucket['mean'].get(index, 0.0)) if served else 0.0
        rows.append({
            'bucket_s': round((index + 1) * bucket_s, 6),
            'served_ops': served / bucket_s,
            'mean_rt_ms': ns_to_ms(mean_rt),
            'total_inst': sample['total_inst'],
            'retried_inst': sample['retried_inst'],
            'collisions': sample['collisions'],
            'bytes': sample['bytes'],
        })
    return pd.DataFrame(rows, columns=CSV_COLUMNS)


def summarize(rows: pd.DataFrame, partial_conflicts: int = 0, first_try: Optional[int] = None) -> Dict[str, float]:
    """
    Steady-state figures of one run; the first and last tenth of the buckets
    are left out. `first_try` is the count of decided instances that never
    saw a recovery round, taken from the event trace; the retry counters
    must add up with it.
    """
    if rows.empty:
        return {'served_ops': 0.0, 'mean_rt_ms': 0.0, 'retried_ratio': 0.0, 'collision_ratio': 0.0,
                'peak_served': 0.0, 'total_inst': 0, 'retried_inst': 0, 'collisions': 0,
                'first_try_inst': 0, 'partial_conflicts': partial_conflicts, 'reconciled': True}
    trim = int(len(rows) * STEADY_TRIM)
    steady = rows.iloc[trim:len(rows) - trim] if len(rows) > 2 * trim else rows
    served = steady['served_ops']
    weight = served.sum()
    mean_rt = float((steady['mean_rt_ms'] * served).sum() / weight) if weight else 0.0
    last = rows.iloc[-1]
    total = int(last['total_inst'])
    retried = int(last['retried_inst'])
    collisions = int(last['collisions'])
    if first_try is None:
        first_try = total - retried
    reconciled = first_try + retried == total
    if not reconciled:
        log_activity('warning', "Retry counters disagree with the event trace", total=total, retried=retried,
                     first_try=first_try)
    return {
        'served_ops': float(served.mean()),
        'mean_rt_ms': mean_rt,
        'retried_ratio': retried / total if total else 0.0,
        'collision_ratio': collisions / total if total else 0.0,
        'peak_served': float(rows['served_ops'].max()),
        'total_inst': total,
        'retried_inst': retried,
        'collisions': collisions,
        'first_try_inst': first_try,
        'partial_conflicts': partial_conflicts,
        'reconciled': reconciled,
    }


# --- Statistics ---
def sign_test(pairs: Iterable[Tuple[float, float]]) -> float:
    """One-sided exact sign test p-value for 'first tends to exceed second'; ties are dropped."""
    wins = losses = 0
    for a, b in pairs:
        if a > b:
            wins += 1
        elif a < b:
            losses += 1
    n = wins + losses
    if n == 0:
        return 1.0
    return sum(math.comb(n, k) for k in range(wins, n + 1)) / 2 ** n


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    frame = pd.DataFrame({'x': list(xs), 'y': list(ys)}).rank()
    value = frame['x'].corr(frame['y'])
    return 0.0 if pd.isna(value) else float(value)


def detect_knee(rates: Sequence[float], served: Sequence[float], tolerance: float = 0.9) -> Optional[float]:
    """The first offered rate the system no longer keeps up with, or None while it tracks the load."""
    for rate, got in zip(rates, served):
        if got < tolerance * rate:
            return rate
    return None


def monotone_non_decreasing(values: Sequence[float], slack: float = 0.05) -> bool:
    return all(b >= a * (1 - slack) for a, b in zip(values, values[1:]))


# --- Running ---
@dataclass
class PointResult:
    algorithm: str
    replicas: int
    rate: float
    seed: int
    rows: pd.DataFrame
    summary: Dict[str, float]
    accounting: Dict[str, int]
    markers: Optional[FailureMarkers] = None
    cluster: Optional[SimCluster] = None

    def summary_row(self) -> Dict[str, object]:
        row = {'algorithm': self.algorithm, 'replicas': self.replicas, 'rate': self.rate}
        row.update({k: self.summary[k] for k in SUMMARY_COLUMNS if k in self.summary})
        return row


def run_point(config: EngineConfig, replicas: int, rate: float, duration_s: float, seed: int,
              algorithm: str = '', generators: Optional[int] = None, max_outstanding: Optional[int] = None,
              failure_target: Optional[str] = None, failure_at_s: Optional[float] = None,
              restart_after_s: Optional[float] = None, drain_s: float = 1.0, bucket_s: float = 1.0,
              check_safety: bool = True) -> PointResult:
    """One simulated run: boot, load, optional failure, drain, measure."""
    cluster = SimCluster(replicas, config, seed=seed, monitor=ClusterMonitor(check_safety))
    generators = generators or replicas
    schedule_load(cluster, generate_load(rate, generators, duration_s, seed), max_outstanding)

    markers = None
    if failure_target is not None:
        at = int((failure_at_s if failure_at_s is not None else duration_s / 2) * NS_PER_S)
        after = None if restart_after_s is None else int(restart_after_s * NS_PER_S)
        markers = inject_failure(cluster, failure_target, at, after)

    bucket_ns = int(bucket_s * NS_PER_S)
    buckets = max(1, math.ceil((duration_s + drain_s) / bucket_s))
    samples: List[Dict[str, int]] = []

    def sample():
        samples.append({
            'total_inst': len(cluster.monitor.first_decided),
            'retried_inst': cluster.monitor.counters.retried_instances,
            'collisions': cluster.monitor.counters.collisions,
            'bytes': cluster.bytes_on_wire(),
            'first_try_inst': cluster.monitor.first_try_instances(),
        })

    for b in range(1, buckets + 1):
        cluster.at(b * bucket_ns, sample)
    cluster.run(buckets * bucket_ns)

    rows = build_rows(cluster.monitor.deliveries, samples, bucket_ns)
    counts = cluster.monitor.accounting()
    if counts['offered'] and counts['served'] < 0.5 * counts['offered']:
        log_activity('warning', "Offered load not absorbed", replicas=replicas, rate=rate,
                     offered=counts['offered'], served=counts['served'])
    if cluster.monitor.violations:
        log_activity('error', "Safety violation", count=len(cluster.monitor.violations),
                     first=cluster.monitor.violations[0])
    first_try = samples[-1]['first_try_inst'] if samples else None
    summary = summarize(rows, cluster.partial_conflicts(), first_try)
    summary['fifo_in_force'] = cluster.net.fifo_in_force
    return PointResult(algorithm, replicas, rate, seed, rows, summary, counts, markers, cluster)


def point_file(spec: ExperimentSpec, algorithm: str, replicas: int, rate: float) -> str:
    return f"{spec.name}-{algorithm}-n{replicas}-r{rate:g}.csv"


def run_experiment(spec: ExperimentSpec, out_dir: Optional[str] = None, on_point=None) -> pd.DataFrame:
    """
    Runs every sweep point of the experiment and returns one summary row per
    point. A point whose cluster fails to boot or run is logged and skipped.
    """
    algorithms = [spec.algorithm]
    if spec.name == 'quorumsize' and spec.algorithm == 'paxos-big-quorum':
        algorithms = ['paxos', 'paxos-big-quorum']
    out = Path(out_dir) if out_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    summaries = []
    for algorithm in algorithms:
        config = spec.point_config(algorithm)
        for n in spec.replicas:
            for rate in spec.rates:
                try:
                    if spec.transport == 'sim':
                        result = run_point(config, n, rate, spec.duration_s, spec.seed, algorithm,
                                           spec.generators, spec.max_outstanding, spec.failure_target,
                                           spec.failure_at_s, spec.restart_after_s, spec.drain_s,
                                           spec.bucket_s, check_safety=False)
                    else:
                        result = run_real_point(config, n, rate, spec, algorithm)
                except Exception as e:
                    log_activity('error', "Sweep point failed", experiment=spec.name, algorithm=algorithm,
                                 replicas=n, rate=rate, error=str(e))
                    continue
                if out is not None:
                    result.rows.to_csv(out / point_file(spec, algorithm, n, rate), index=False,
                                       columns=CSV_COLUMNS)
                summaries.append(result.summary_row())
                if on_point is not None:
                    on_point(result)

    table = pd.DataFrame(summaries, columns=SUMMARY_COLUMNS)
    if out is not None:
        table.to_csv(out / 'summary.csv', index=False)
    return table


def collision_sweep(rates: Sequence[float], seeds: Sequence[int], replicas: int = 5,
                    proposers: Optional[int] = None, duration_s: float = 0.3,
                    algorithm: str = 'fast-small', config: Optional[EngineConfig] = None) -> pd.DataFrame:
    """Collision fraction per (rate, seed) with `proposers` concurrent load generators."""
    config = engine_config(algorithm, config)
    rows = []
    for rate in rates:
        for seed in seeds:
            result = run_point(config, replicas, rate, duration_s, seed, algorithm,
                               generators=proposers or replicas, drain_s=0.5, bucket_s=duration_s + 0.5)
            total = result.summary['total_inst']
            rows.append({
                'rate': rate,
                'seed': seed,
                'total_inst': total,
                'retried_inst': result.summary['retried_inst'],
                'collisions': result.summary['collisions'],
                'collision_fraction': result.summary['collision_ratio'],
            })
    return pd.DataFrame(rows)


# --- Real mode ---
class RealCluster:
    """One app.py process per replica on this host, driven over the control channel."""

    def __init__(self, n: int, config: EngineConfig, data_dir: str, base_port: int = 7100,
                 control_base: int = 8100, timeout_s: float = 10.0):
        self.n = n
        self.config = config
        self.data_dir = Path(data_dir)
        self.base_port = base_port
        self.control_base = control_base
        self.timeout_s = timeout_s
        self.procs: Dict[ReplicaId, subprocess.Popen] = {}
        self.app = Path(__file__).with_name('app.py')

    def url(self, replica: ReplicaId, path: str) -> str:
        return f"http://127.0.0.1:{self.control_base + replica}{path}"

    def _env(self, replica: ReplicaId) -> Dict[str, str]:
        """The engine config travels as upper-case variables; addresses are per replica."""
        peers = ','.join(f"{r}=127.0.0.1:{self.base_port + r}" for r in range(self.n))
        env = dict(os.environ)
        for f in fields(EngineConfig):
            value = getattr(self.config, f.name)
            if value is None or f.name in NODE_KEYS:
                continue
            env[f.name.upper()] = ','.join(value) if isinstance(value, list) else str(value)
        env.update({
            'REPLICA_ID': str(replica),
            'CONTROL_PORT': str(self.control_base + replica),
            'DATA_DIR': str(self.data_dir / f"r{replica}"),
            'TRANSPORT': 'udp',
            'BIND': f"127.0.0.1:{self.base_port + replica}",
            'PEERS': peers,
        })
        return env

    def launch(self, replica: ReplicaId) -> None:
        self.procs[replica] = subprocess.Popen([sys.executable, str(self.app)], env=self._env(replica))
        deadline = time.monotonic() + self.timeout_s
        while time.monotonic() < deadline:
            try:
                if requests.get(self.url(replica, '/api/status'), timeout=0.5).ok:
                    return
            except requests.RequestException:
                pass
            time.sleep(0.1)
        raise HarnessError(f"replica r{replica} did not come up")

    def start(self) -> None:
        for r in range(self.n):
            self.launch(r)

    def kill(self, replica: ReplicaId) -> None:
        proc = self.procs.pop(replica, None)
        if proc is not None:
            proc.kill()
            proc.wait()

    def coordinator(self) -> ReplicaId:
        """The coordinator most running replicas report on /api/status."""
        votes: Dict[ReplicaId, int] = {}
        for r in sorted(self.procs):
            try:
                status = requests.get(self.url(r, '/api/status'), timeout=self.timeout_s).json()
            except (requests.RequestException, ValueError) as e:
                logger.warning("no status from r%d: %s", r, e)
                continue
            if status.get('coordinator') is not None:
                c = int(status['coordinator'])
                votes[c] = votes.get(c, 0) + 1
        if not votes:
            raise HarnessError("no replica reports a coordinator")
        return max(votes, key=lambda c: (votes[c], -c))

    def pick(self, target: str) -> ReplicaId:
        coordinator = self.coordinator()
        if target == COORDINATOR:
            return coordinator
        others = [r for r in self.procs if r != coordinator]
        if not others:
            raise HarnessError("no non-coordinator replica is running")
        return max(others)

    def start_load(self, rate: float, duration_s: float, seed: int) -> None:
        for r in range(self.n):
            body = {'rate': rate, 'duration': duration_s, 'seed': seed, 'generator': r, 'generators': self.n}
            requests.post(self.url(r, '/api/load'), json=body, timeout=self.timeout_s).raise_for_status()

    def metrics(self) -> Dict[ReplicaId, dict]:
        out = {}
        for r in sorted(self.procs):
            try:
                out[r] = requests.get(self.url(r, '/api/metrics'), timeout=self.timeout_s).json()
            except requests.RequestException as e:
                logger.warning("no metrics from r%d: %s", r, e)
        return out

    def stop(self) -> None:
        for r in list(self.procs):
            try:
                requests.post(self.url(r, '/api/shutdown'), timeout=1)
            except requests.RequestException:
                pass
            self.kill(r)


def run_real_point(config: EngineConfig, n: int, rate: float, spec: ExperimentSpec, algorithm: str) -> PointResult:
    cluster = RealCluster(n, config, data_dir=os.path.join('data', f"{spec.name}-{algorithm}-n{n}"))
    markers = None
    timers = []
    try:
        cluster.start()
        started = time.monotonic_ns()
        if spec.failure_target is not None:
            markers = FailureMarkers(spec.failure_target)

            def kill():
                markers.replica = cluster.pick(spec.failure_target)
                markers.killed_ns = time.monotonic_ns() - started
                cluster.kill(markers.replica)
                if spec.restart_after_s is not None:
                    time.sleep(spec.restart_after_s)
                    markers.restarted_ns = time.monotonic_ns() - started
                    cluster.launch(markers.replica)

            at = spec.failure_at_s if spec.failure_at_s is not None else spec.duration_s / 2
            timers.append(threading.Timer(at, kill))
        cluster.start_load(rate, spec.duration_s, spec.seed)
        for t in timers:
            t.start()
        time.sleep(spec.duration_s + spec.drain_s)
        metrics = cluster.metrics()
    finally:
        for t in timers:
            t.cancel()
        cluster.stop()

    deliveries = []
    counts = {'offered': 0, 'served': 0, 'pending': 0, 'rejected': 0, 'lost': 0}
    totals = {'total_inst': 0, 'retried_inst': 0, 'collisions': 0, 'bytes': 0}
    for m in metrics.values():
        deliveries.extend((int(at), int(rt)) for at, rt in m.get('deliveries', []))
        for key in counts:
            counts[key] += int(m.get('accounting', {}).get(key, 0))
        c = m.get('counters', {})
        totals['total_inst'] = max(totals['total_inst'], int(c.get('total_instances', 0)))
        totals['retried_inst'] += int(c.get('retried_instances', 0))
        totals['collisions'] += int(c.get('collisions', 0))
        totals['bytes'] += int(m.get('bytes', 0))
    bucket_ns = int(spec.bucket_s * NS_PER_S)
    buckets = max(1, math.ceil((spec.duration_s + spec.drain_s) / spec.bucket_s))
    # only end-of-run counters are known in real mode
    samples = [dict(totals) for _ in range(buckets)]
    rows = build_rows(deliveries, samples, bucket_ns)
    return PointResult(algorithm, n, rate, spec.seed, rows, summarize(rows), counts, markers)
