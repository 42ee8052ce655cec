"""
Timeouts, retry accounting and coordinator election.

In Paxos only the coordinator notices stalled rounds; in Fast Paxos every
replica does and alerts the coordinator, which starts the recovery round.
"""
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Set

from config import EngineConfig
from models import ReplicaId

COORDINATOR_ONLY = 'coordinator-only'
ALL_REPLICAS = 'all-replicas'

NO_ACTION = 'none'
RECOVER = 'recover'
ALERT = 'alert'

TIMEOUT = 'timeout'
COLLISION = 'collision'


@dataclass(frozen=True)
class TimeoutPolicy:
    mode: str
    round_timeout_ns: int
    election_timeout_ns: int
    backoff_factor: float = 2.0
    backoff_cap: float = 8.0

    def __post_init__(self):
        if self.mode not in (COORDINATOR_ONLY, ALL_REPLICAS):
            raise ValueError(f"unknown timeout mode: {self.mode!r}")
        if self.backoff_factor < 1:
            raise ValueError("backoff factor must be >= 1")

    @classmethod
    def from_config(cls, config: EngineConfig) -> 'TimeoutPolicy':
        return cls(
            mode=ALL_REPLICAS if config.fast_rounds else COORDINATOR_ONLY,
            round_timeout_ns=config.round_timeout_ns,
            election_timeout_ns=config.election_timeout_ns,
            backoff_factor=config.backoff_factor,
            backoff_cap=config.backoff_cap,
        )

    @property
    def heartbeat_interval_ns(self) -> int:
        return self.round_timeout_ns // 2

    @property
    def tick_ns(self) -> int:
        return max(1, self.round_timeout_ns // 4)

    def backoff_ns(self, attempts: int) -> int:
        """Round timeout grown by factor^attempts, capped at cap times the base."""
        scale = min(self.backoff_factor ** attempts, self.backoff_cap)
        return int(self.round_timeout_ns * scale)


@dataclass
class RetryCounters:
    total_instances: int = 0
    retried_instances: int = 0
    collisions: int = 0
    recovery_rounds: int = 0
    alerts_sent: int = 0
    alerts_received: int = 0
    retried: Set[int] = field(default_factory=set, repr=False)
    collided: Set[int] = field(default_factory=set, repr=False)

    def as_dict(self) -> Dict[str, int]:
        return {
            'total_instances': self.total_instances,
            'retried_instances': self.retried_instances,
            'collisions': self.collisions,
            'recovery_rounds': self.recovery_rounds,
            'alerts_sent': self.alerts_sent,
            'alerts_received': self.alerts_received,
        }


def on_round_timeout(instance: int, policy: TimeoutPolicy, me: ReplicaId,
                     coordinator: Optional[ReplicaId]) -> str:
    if coordinator == me:
        return RECOVER
    if policy.mode == COORDINATOR_ONLY or coordinator is None:
        return NO_ACTION
    return ALERT


def elect_coordinator(alive: Iterable[ReplicaId], current: Optional[ReplicaId] = None) -> ReplicaId:
    """Keeps a live coordinator; otherwise the lowest live replica id wins."""
    alive = set(alive)
    if not alive:
        raise ValueError("no live replica to elect")
    if current is not None and current in alive:
        return current
    return min(alive)


def record_retry(kind: str, c: RetryCounters, instance: Optional[int] = None) -> RetryCounters:
    """Counts a recovery round; each instance is counted as retried once."""
    if kind not in (TIMEOUT, COLLISION):
        raise ValueError(f"unknown retry kind: {kind!r}")
    c.recovery_rounds += 1
    key = instance if instance is not None else -c.recovery_rounds
    if key not in c.retried:
        c.retried.add(key)
        c.retried_instances += 1
    if kind == COLLISION and key not in c.collided:
        c.collided.add(key)
        c.collisions += 1
    return c


class FailureDetector:
    """Last-heard bookkeeping; a replica silent for the election timeout counts as dead."""

    def __init__(self, me: ReplicaId, members: Iterable[ReplicaId], timeout_ns: int, now: int = 0):
        self.me = me
        self.timeout_ns = timeout_ns
        self.last_heard: Dict[ReplicaId, int] = {r: now for r in members}

    def heard(self, replica: ReplicaId, now: int) -> None:
        self.last_heard[replica] = now

    def silent_for(self, replica: ReplicaId, now: int) -> int:
        return now - self.last_heard.get(replica, 0)

    def alive(self, now: int) -> Set[ReplicaId]:
        live = {r for r, t in self.last_heard.items() if now - t < self.timeout_ns}
        live.add(self.me)
        return live

    def reset(self, now: int) -> None:
        for replica in self.last_heard:
            self.last_heard[replica] = now
