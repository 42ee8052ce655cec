"""
Shared domain types: rounds, values, protocol messages, application commands,
batches and ledger records.
"""
from dataclasses import dataclass, field
from enum import IntEnum
from functools import total_ordering
from typing import Optional, Tuple

from utils import DIGEST_SIZE, content_digest

ReplicaId = int
InstanceId = int

# Wire sentinels: an open-ended range limit, and "coordinator, pick the instance".
OPEN_LIMIT = 2 ** 64 - 1
NO_INSTANCE = 2 ** 64 - 1


class RoundKind(IntEnum):
    CLASSIC = 0
    FAST = 1


@total_ordering
@dataclass(frozen=True, eq=False)
class RoundId:
    """Totally ordered by (counter, owner); the kind travels with the id."""
    counter: int
    owner: ReplicaId
    kind: RoundKind = RoundKind.CLASSIC

    @property
    def key(self) -> Tuple[int, int]:
        return (self.counter, self.owner)

    @property
    def is_fast(self) -> bool:
        return self.kind == RoundKind.FAST

    def __eq__(self, other):
        if not isinstance(other, RoundId):
            return NotImplemented
        return self.key == other.key

    def __lt__(self, other):
        if not isinstance(other, RoundId):
            return NotImplemented
        return self.key < other.key

    def __hash__(self):
        return hash(self.key)

    def __repr__(self):
        tag = 'F' if self.is_fast else 'C'
        return f"R({self.counter},r{self.owner},{tag})"


NOOP_DIGEST = content_digest(b'')


def round_zero(owner: ReplicaId = 0) -> RoundId:
    return RoundId(0, owner, RoundKind.CLASSIC)


def max_round(*rounds: Optional[RoundId]) -> Optional[RoundId]:
    present = [r for r in rounds if r is not None]
    return max(present) if present else None


@dataclass(frozen=True, eq=False)
class Value:
    """A proposed value; identity is the content digest of its payload."""
    digest: bytes
    payload: bytes

    @classmethod
    def of(cls, payload: bytes) -> 'Value':
        return cls(content_digest(payload), bytes(payload))

    @property
    def is_noop(self) -> bool:
        return self.digest == NOOP_DIGEST

    def __eq__(self, other):
        if not isinstance(other, Value):
            return NotImplemented
        return self.digest == other.digest

    def __hash__(self):
        return hash(self.digest)

    def __repr__(self):
        return f"Value({self.digest[:4].hex()}, {len(self.payload)}B)"


NOOP = Value.of(b'')
ZERO_DIGEST = bytes(DIGEST_SIZE)


class MessageKind(IntEnum):
    PHASE1A = 1
    PHASE1B = 2
    PHASE2A = 3
    ANY = 4
    PHASE2B = 5
    PROPOSE = 6
    DECIDED = 7
    CATCHUP_REQUEST = 8
    CATCHUP_REPLY = 9
    ALERT = 10
    HEARTBEAT = 11


@dataclass(frozen=True)
class ReportedVote:
    """One acceptor vote as carried inside a Phase1b reply."""
    instance: InstanceId
    round: RoundId
    value: Value


@dataclass(frozen=True)
class Message:
    kind: MessageKind
    sender: ReplicaId
    round: RoundId
    instance: InstanceId = 0
    limit: Optional[InstanceId] = None
    digest: bytes = ZERO_DIGEST
    payload: Optional[bytes] = None
    vote_round: Optional[RoundId] = None

    @property
    def value(self) -> Optional[Value]:
        if self.payload is None:
            return None
        return Value(self.digest, self.payload)

    @property
    def is_range(self) -> bool:
        return self.limit is None

    def covers(self, instance: InstanceId) -> bool:
        if instance < self.instance:
            return False
        return self.limit is None or instance < self.limit


@dataclass(frozen=True)
class Command:
    """A hash-table put: associates an integer key with a 5-character string."""
    key: int
    value: str
    op: str = 'put'

    def __post_init__(self):
        if self.op != 'put':
            raise ValueError(f"unsupported op: {self.op}")
        if len(self.value) != 5:
            raise ValueError(f"value must be exactly 5 characters: {self.value!r}")


@dataclass(frozen=True)
class Batch:
    """The unit ordered by one consensus instance."""
    batch_id: int
    proposer: ReplicaId
    commands: Tuple[Command, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if not self.commands:
            raise ValueError("a batch carries at least one command")


def make_batch_id(proposer: ReplicaId, incarnation: int, seq: int) -> int:
    return (proposer << 48) | ((incarnation & 0xFFFF) << 32) | (seq & 0xFFFFFFFF)


class RecordTag(IntEnum):
    INCARNATION = 1
    PROMISE = 2
    RANGE_PROMISE = 3
    VOTE = 4
    DECIDED = 5


@dataclass(frozen=True)
class LedgerRecord:
    """One durable change to a replica's ledger."""
    tag: RecordTag
    instance: InstanceId = 0
    round: Optional[RoundId] = None
    value: Optional[Value] = None


@dataclass
class InstanceLedgerState:
    """Per-instance view rebuilt from the ledger."""
    instance: InstanceId
    promised: Optional[RoundId] = None
    vote: Optional[Tuple[RoundId, Value]] = None
    decided: Optional[Value] = None
