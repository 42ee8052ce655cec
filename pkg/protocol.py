"""
Agent rules for a single consensus instance, shared by both algorithms, and
the multi-instance Acceptor and Learner that a replica runs.

The module-level functions are pure: they take a state and a message and
return the new state and the reply to emit (None when the message is
declined by ignoring it).
"""
import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

from models import (LedgerRecord, Message, MessageKind, NOOP_DIGEST, RecordTag, ReplicaId,
                    ReportedVote, RoundId, RoundKind, Value, max_round)
from quorums import QuorumSpec
from wire import encode_reports

logger = logging.getLogger(__name__)

Vote = Tuple[RoundId, Value]


class ProtocolViolation(RuntimeError):
    """A sender contradicted an earlier message for the same round."""


class PickRuleError(RuntimeError):
    """Two values reached the pick threshold: the quorum system is unsound."""


@dataclass(frozen=True)
class AcceptorState:
    promised: Optional[RoundId] = None
    last_vote: Optional[Vote] = None


EMPTY_STATE = AcceptorState()


def _same_vote(a: Optional[Vote], b: Optional[Vote]) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return a[0] == b[0] and a[1] == b[1]


@dataclass
class CoordinatorTally:
    """Phase 1b replies and Phase 2b votes gathered for one instance."""
    round: Optional[RoundId] = None
    replies: Dict[ReplicaId, Optional[Vote]] = field(default_factory=dict)
    votes2b: Dict[ReplicaId, Vote] = field(default_factory=dict)
    strict: bool = False

    def _conflict(self, what: str, sender: ReplicaId, old, new) -> None:
        detail = f"conflicting duplicate {what} from r{sender}: {old} vs {new}"
        if self.strict:
            raise ProtocolViolation(detail)
        logger.warning("dropping %s", detail)

    def add_reply(self, sender: ReplicaId, vote: Optional[Vote]) -> bool:
        if sender in self.replies:
            if not _same_vote(self.replies[sender], vote):
                self._conflict('phase 1b', sender, self.replies[sender], vote)
            return False
        self.replies[sender] = vote
        return True

    def add_vote(self, sender: ReplicaId, vote: Vote) -> bool:
        """Keeps the latest-round vote of each acceptor."""
        current = self.votes2b.get(sender)
        if current is not None:
            if current[0] == vote[0]:
                if current[1] != vote[1]:
                    self._conflict('phase 2b', sender, current, vote)
                return False
            if current[0] > vote[0]:
                return False
        self.votes2b[sender] = vote
        return True

    def count(self, rnd: RoundId, digest: bytes) -> int:
        return sum(1 for r, v in self.votes2b.values() if r == rnd and v.digest == digest)


# --- Acceptor rules ---
def _phase1b(me: ReplicaId, m: Message, vote: Optional[Vote]) -> Message:
    if vote is None:
        return Message(MessageKind.PHASE1B, me, m.round, instance=m.instance, limit=m.limit)
    return Message(MessageKind.PHASE1B, me, m.round, instance=m.instance, limit=m.limit,
                   digest=vote[1].digest, payload=vote[1].payload, vote_round=vote[0])


def reported_vote(m: Message) -> Optional[Vote]:
    """The last vote carried by a single-instance Phase 1b."""
    if m.vote_round is None:
        return None
    return (m.vote_round, Value(m.digest, m.payload or b''))


def acceptor_on_phase1a(state: AcceptorState, m: Message, me: ReplicaId = 0) -> Tuple[AcceptorState, Optional[Message]]:
    if state.promised is not None and m.round < state.promised:
        return state, None
    if state.promised is None or m.round > state.promised:
        state = replace(state, promised=m.round)
    # an equal round is a retransmit: answer again without changing anything
    return state, _phase1b(me, m, state.last_vote)


def _cast(state: AcceptorState, rnd: RoundId, value: Value, instance: int,
          me: ReplicaId) -> Tuple[AcceptorState, Optional[Message]]:
    if state.promised is not None and state.promised > rnd:
        return state, None
    if state.last_vote is not None and state.last_vote[0] >= rnd:
        return state, None
    state = AcceptorState(promised=max_round(state.promised, rnd), last_vote=(rnd, value))
    return state, Message(MessageKind.PHASE2B, me, rnd, instance=instance, digest=value.digest)


def acceptor_on_phase2a(state: AcceptorState, m: Message, me: ReplicaId = 0) -> Tuple[AcceptorState, Optional[Message]]:
    return _cast(state, m.round, m.value, m.instance, me)


def acceptor_on_any_then_propose(state: AcceptorState, any_round: RoundId, p: Message,
                                 me: ReplicaId = 0) -> Tuple[AcceptorState, Optional[Message]]:
    if not any_round.is_fast:
        raise ValueError(f"any message requires a fast round, got {any_round}")
    return _cast(state, any_round, p.value, p.instance, me)


# --- Coordinator rules ---
def _highest_reported(tally: CoordinatorTally) -> Tuple[Optional[RoundId], List[Value]]:
    reported = [v for v in tally.replies.values() if v is not None]
    if not reported:
        return None, []
    k = max(r for r, _ in reported)
    return k, [value for r, value in reported if r == k]


def coordinator_pick_value(tally: CoordinatorTally, q: QuorumSpec) -> Optional[Value]:
    """
    The value the coordinator is forced to propose, or None when it is free
    to choose. The rule follows the kind of the highest reported round.
    """
    if len(tally.replies) < q.classic_size:
        raise ValueError(f"need {q.classic_size} phase 1b replies, got {len(tally.replies)}")
    k, in_k = _highest_reported(tally)
    if k is None:
        return None

    if not k.is_fast:
        if len({v.digest for v in in_k}) > 1:
            raise PickRuleError(f"classic round {k} reported with two values")
        return in_k[0]

    threshold = len(tally.replies) + q.size_for(RoundKind.FAST) - q.n
    counts = Counter(v.digest for v in in_k)
    winners = sorted(d for d, c in counts.items() if c >= threshold)
    if len(winners) > 1:
        raise PickRuleError(f"{len(winners)} values reach threshold {threshold} in {k}")
    if not winners:
        return None
    return next(v for v in in_k if v.digest == winners[0])


def free_choice(tally: CoordinatorTally) -> Optional[Value]:
    """Most-voted value of the highest reported round; ties go to the smallest digest."""
    k, in_k = _highest_reported(tally)
    if k is None:
        return None
    counts = Counter(v.digest for v in in_k)
    best = min(counts, key=lambda d: (-counts[d], d))
    return next(v for v in in_k if v.digest == best)


# --- Learner rules ---
def learner_on_vote(votes: CoordinatorTally, m: Message, q: QuorumSpec) -> Optional[Value]:
    value = Value(m.digest, m.payload or b'')
    votes.add_vote(m.sender, (m.round, value))
    if votes.count(m.round, m.digest) >= q.size_for(m.round.kind):
        return value
    return None


def detect_collision(votes: CoordinatorTally, q: QuorumSpec, alive_count: int,
                     rnd: Optional[RoundId] = None) -> bool:
    """True when split votes leave no value able to reach a fast quorum."""
    fast = [(r, v) for r, v in votes.votes2b.values() if r.is_fast]
    if not fast or q.fast_size is None:
        return False
    rnd = rnd or max(r for r, _ in fast)
    in_round = [v.digest for r, v in fast if r == rnd]
    counts = Counter(in_round)
    if len(counts) < 2:
        return False
    unvoted = max(0, alive_count - len(in_round))
    return all(c + unvoted < q.fast_size for c in counts.values())


def start_recovery_round(current: RoundId, owner: ReplicaId) -> RoundId:
    return RoundId(current.counter + 1, owner, RoundKind.CLASSIC)


class Acceptor:
    """
    The acceptor of every instance at one replica.

    Besides per-instance state it keeps the open-ended range promises made
    to factorized Phase 1 requests and the Any grant of the current fast
    round. Every durable change is queued in `records` for the ledger.
    """

    def __init__(self, me: ReplicaId, hold_ns: int):
        self.me = me
        self.hold_ns = hold_ns
        self.states: Dict[int, AcceptorState] = {}
        self.range_promises: List[Tuple[int, RoundId]] = []
        self.any_grant: Optional[Tuple[int, RoundId]] = None
        self.held: List[Tuple[int, Message]] = []
        self.records: List[LedgerRecord] = []

    # --- Promise bookkeeping ---
    def range_promise(self, instance: int) -> Optional[RoundId]:
        best = None
        for start, rnd in self.range_promises:
            if start <= instance:
                best = max_round(best, rnd)
        return best

    def promise_for(self, instance: int) -> Optional[RoundId]:
        return max_round(self.states.get(instance, EMPTY_STATE).promised, self.range_promise(instance))

    def state_for(self, instance: int) -> AcceptorState:
        return replace(self.states.get(instance, EMPTY_STATE), promised=self.promise_for(instance))

    def highest_promise_from(self, start: int) -> Optional[RoundId]:
        best = max_round(*(rnd for _, rnd in self.range_promises))
        for instance, state in self.states.items():
            if instance >= start:
                best = max_round(best, state.promised)
        return best

    def drain_records(self) -> List[LedgerRecord]:
        records, self.records = self.records, []
        return records

    def restore(self, states: Dict[int, AcceptorState], range_promises: List[Tuple[int, RoundId]]) -> None:
        self.states = dict(states)
        self.range_promises = list(range_promises)

    def forget_below(self, watermark: int) -> None:
        for instance in [i for i in self.states if i < watermark]:
            del self.states[instance]

    # --- Message handlers ---
    def on_phase1a(self, m: Message, watermark: int) -> Optional[Message]:
        if not m.is_range:
            before = self.promise_for(m.instance)
            state, reply = acceptor_on_phase1a(self.state_for(m.instance), m, self.me)
            if reply is not None and state.promised != before:
                self.states[m.instance] = state
                self.records.append(LedgerRecord(RecordTag.PROMISE, m.instance, m.round))
            return reply

        start = m.instance
        highest = self.highest_promise_from(start)
        if highest is not None and m.round < highest:
            return None
        if highest is None or m.round > highest:
            self.range_promises = [(s, r) for s, r in self.range_promises if s < start] + [(start, m.round)]
            self.records.append(LedgerRecord(RecordTag.RANGE_PROMISE, start, m.round))
            if self.any_grant is not None and self.any_grant[1] < m.round:
                self.any_grant = None
        floor = max(start, watermark)
        votes = [ReportedVote(i, s.last_vote[0], s.last_vote[1])
                 for i, s in sorted(self.states.items()) if i >= floor and s.last_vote is not None]
        return Message(MessageKind.PHASE1B, self.me, m.round, instance=start, limit=None,
                       payload=encode_reports(watermark, votes))

    def _store_vote(self, instance: int, state: AcceptorState, reply: Optional[Message]) -> Optional[Message]:
        if reply is None:
            return None
        self.states[instance] = state
        rnd, value = state.last_vote
        self.records.append(LedgerRecord(RecordTag.VOTE, instance, rnd, value))
        return reply

    def on_phase2a(self, m: Message) -> Optional[Message]:
        state, reply = acceptor_on_phase2a(self.state_for(m.instance), m, self.me)
        return self._store_vote(m.instance, state, reply)

    def on_any(self, m: Message, now: int) -> List[Message]:
        if not m.round.is_fast:
            return []
        covering = self.range_promise(m.instance)
        if covering is not None and covering > m.round:
            return []
        if self.any_grant is not None and self.any_grant[1] > m.round:
            return []
        self.any_grant = (m.instance, m.round)
        held, self.held = self.held, []
        votes = []
        for expiry, propose in held:
            if expiry <= now:
                continue
            if propose.instance < m.instance:
                self.held.append((expiry, propose))
                continue
            vote = self.on_propose(propose, now)
            if vote is not None:
                votes.append(vote)
        return votes

    def on_propose(self, m: Message, now: int) -> Optional[Message]:
        grant = self.any_grant
        if grant is None or m.instance < grant[0]:
            self.held.append((now + self.hold_ns, m))
            return None
        state, reply = acceptor_on_any_then_propose(self.state_for(m.instance), grant[1], m, self.me)
        return self._store_vote(m.instance, state, reply)

    def expire_held(self, now: int) -> None:
        self.held = [(expiry, m) for expiry, m in self.held if expiry > now]


class Learner:
    """Counts votes per instance and announces each decision once."""

    def __init__(self, quorum: QuorumSpec, strict: bool = False):
        self.quorum = quorum
        self.strict = strict
        self.tallies: Dict[int, CoordinatorTally] = {}
        self.decided: Dict[int, bytes] = {}
        self.values: Dict[bytes, bytes] = {NOOP_DIGEST: b''}
        self.partial_conflicts = 0
        self.highest_seen = -1

    def remember(self, value: Optional[Value]) -> None:
        if value is not None and value.payload:
            self.values.setdefault(value.digest, value.payload)

    def resolve(self, digest: bytes) -> Optional[Value]:
        payload = self.values.get(digest)
        if payload is None:
            return None
        return Value(digest, payload)

    def observe(self, instance: int) -> None:
        if instance > self.highest_seen:
            self.highest_seen = instance

    def tally(self, instance: int) -> CoordinatorTally:
        if instance not in self.tallies:
            self.tallies[instance] = CoordinatorTally(strict=self.strict)
        return self.tallies[instance]

    def on_vote(self, m: Message) -> Optional[bytes]:
        """Returns the decided digest the first time an instance decides."""
        self.observe(m.instance)
        if m.instance in self.decided:
            return None
        tally = self.tally(m.instance)
        value = learner_on_vote(tally, m, self.quorum)
        if value is None:
            return None
        if m.round.is_fast and any(r == m.round and v.digest != value.digest for r, v in tally.votes2b.values()):
            self.partial_conflicts += 1
        return self._decide(m.instance, value.digest)

    def on_decided(self, instance: int, value: Value) -> Optional[bytes]:
        self.observe(instance)
        self.remember(value)
        if instance in self.decided:
            return None
        return self._decide(instance, value.digest)

    def _decide(self, instance: int, digest: bytes) -> bytes:
        self.decided[instance] = digest
        self.tallies.pop(instance, None)
        return digest

    def forget_below(self, watermark: int) -> None:
        for instance in [i for i in self.decided if i < watermark]:
            digest = self.decided.pop(instance)
            if digest != NOOP_DIGEST:
                self.values.pop(digest, None)
        for instance in [i for i in self.tallies if i < watermark]:
            del self.tallies[instance]
