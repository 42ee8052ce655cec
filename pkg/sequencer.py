"""
Maps the stream of application commands onto consensus instances.

Proposer side: commands are queued, packed into batches and proposed one
batch at a time. Coordinator side: Phase 1 runs once for the whole open
range of unused instances, after which the coordinator either hands out
instances to proposals (classic rounds) or lets proposers address the
acceptors directly through an Any message (fast rounds).
"""
import logging
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Dict, List, Optional, Set, Tuple

from models import (Batch, Command, Message, MessageKind, NOOP, ReplicaId, RoundId, RoundKind, Value,
                    make_batch_id)
from protocol import CoordinatorTally, coordinator_pick_value, free_choice, reported_vote, start_recovery_round
from quorums import QuorumSpec
from wire import DecodeError, batch_value, decode_batch, decode_reports, peek_batch_id

logger = logging.getLogger(__name__)


class BackpressureError(RuntimeError):
    """Too many commands are waiting for a batch slot."""


class AgreementViolation(RuntimeError):
    """Two different values were decided for the same instance."""


@dataclass
class InstanceWindow:
    """Decisions known at one replica and the in-order delivery watermark."""
    next_unused: int = 0
    promised_through: Optional[int] = None
    decided: Dict[int, Value] = field(default_factory=dict)
    delivered: int = 0
    delivered_batches: Set[int] = field(default_factory=set)

    @property
    def max_decided(self) -> int:
        return max(self.decided) if self.decided else -1


def record_decision(i: int, v: Value, window: InstanceWindow) -> List[Tuple[int, Batch]]:
    """
    Stores a decision and returns the batches that became deliverable, in
    instance order. NOOPs and batches already delivered under another
    instance advance the watermark without producing anything.
    """
    known = window.decided.get(i)
    if known is not None:
        if known.digest != v.digest:
            raise AgreementViolation(f"instance {i} decided as {known} and {v}")
        return []
    if i < window.delivered:
        return []
    window.decided[i] = v

    ready = []
    while window.delivered in window.decided:
        instance = window.delivered
        value = window.decided[instance]
        window.delivered += 1
        if value.is_noop:
            continue
        try:
            batch = decode_batch(value.payload)
        except DecodeError:
            logger.error("undecodable batch decided in instance %d", instance)
            continue
        if batch.batch_id in window.delivered_batches:
            continue
        window.delivered_batches.add(batch.batch_id)
        ready.append((instance, batch))
    window.next_unused = max(window.next_unused, window.delivered)
    return ready


def on_decide(i: int, v: Value, window: InstanceWindow) -> List[Command]:
    return [c for _, batch in record_decision(i, v, window) for c in batch.commands]


def factorize_phase1(coord_round: RoundId, window: InstanceWindow) -> List[Message]:
    """One Phase 1a for every still unused instance, from the watermark on."""
    window.next_unused = max(window.next_unused, window.delivered)
    window.promised_through = None
    return [Message(MessageKind.PHASE1A, coord_round.owner, coord_round, instance=window.delivered, limit=None)]


def theoretical_delay(mode: str) -> int:
    """One-way message delays from Propose to the first decision, in steady state."""
    if mode == 'classic':
        return 3
    if mode == 'fast':
        return 2
    raise ValueError(f"unknown mode: {mode!r}")


# --- Proposer ---
@dataclass
class Ticket:
    """Handle for one submitted command; resolves once, on delivery at this replica."""
    command: Command
    submitted_ns: int
    batch_id: Optional[int] = None
    instance: Optional[int] = None
    delivered_ns: Optional[int] = None
    lost: bool = False
    _done: threading.Event = field(default_factory=threading.Event, repr=False, compare=False)

    @property
    def done(self) -> bool:
        return self.delivered_ns is not None

    @property
    def response_ns(self) -> Optional[int]:
        if self.delivered_ns is None:
            return None
        return self.delivered_ns - self.submitted_ns

    def resolve(self, instance: int, now: int) -> None:
        if self.done or self.lost:
            return
        self.instance = instance
        self.delivered_ns = now
        self._done.set()

    def abandon(self) -> None:
        if not self.done:
            self.lost = True
            self._done.set()

    def wait(self, timeout: Optional[float] = None) -> bool:
        return self._done.wait(timeout) and self.done


@dataclass
class InFlight:
    batch: Batch
    value: Value
    tickets: List[Ticket]
    sent_ns: int
    instance: Optional[int] = None
    attempts: int = 0


class Proposer:
    """Batches submitted commands, keeping one proposal outstanding at a time."""

    def __init__(self, me: ReplicaId, incarnation: int, max_batch_commands: int, pending_bound: int):
        self.me = me
        self.incarnation = incarnation
        self.max_batch_commands = max_batch_commands
        self.pending_bound = pending_bound
        self.queue: Deque[Ticket] = deque()
        self.in_flight: Optional[InFlight] = None
        self.seq = 0

    @property
    def pending(self) -> int:
        flying = len(self.in_flight.tickets) if self.in_flight else 0
        return len(self.queue) + flying

    def submit(self, command: Command, now: int) -> Ticket:
        if self.pending >= self.pending_bound:
            raise BackpressureError(f"{self.pending} commands pending (bound {self.pending_bound})")
        ticket = Ticket(command, now)
        self.queue.append(ticket)
        return ticket

    def seal(self, now: int) -> Optional[InFlight]:
        if self.in_flight is not None or not self.queue:
            return None
        tickets = [self.queue.popleft() for _ in range(min(self.max_batch_commands, len(self.queue)))]
        self.seq += 1
        batch_id = make_batch_id(self.me, self.incarnation, self.seq)
        batch = Batch(batch_id, self.me, tuple(t.command for t in tickets))
        for t in tickets:
            t.batch_id = batch_id
        self.in_flight = InFlight(batch, batch_value(batch), tickets, now)
        return self.in_flight

    def on_delivered(self, batch_id: int, instance: int, now: int) -> List[Ticket]:
        flight = self.in_flight
        if flight is None or flight.batch.batch_id != batch_id:
            return []
        for t in flight.tickets:
            t.resolve(instance, now)
        self.in_flight = None
        return flight.tickets

    def abandon_all(self) -> List[Ticket]:
        tickets = list(self.queue)
        if self.in_flight is not None:
            tickets.extend(self.in_flight.tickets)
        self.queue.clear()
        self.in_flight = None
        for t in tickets:
            t.abandon()
        return tickets


# --- Coordinator ---
@dataclass
class Recovery:
    instance: int
    round: RoundId
    tally: CoordinatorTally
    started_ns: int
    deadline_ns: int
    attempts: int = 0
    sent: bool = False


@dataclass
class Phase1Result:
    messages: List[Message]
    watermark: int
    ahead: Optional[ReplicaId] = None


class Coordinator:
    """Factorized Phase 1, instance assignment and single-instance recovery rounds."""

    def __init__(self, me: ReplicaId, quorum: QuorumSpec, fast_rounds: bool, strict: bool = False):
        self.me = me
        self.quorum = quorum
        self.fast_rounds = fast_rounds
        self.strict = strict
        self.round: Optional[RoundId] = None
        self.active = False
        self.replies: Dict[ReplicaId, Tuple[int, list]] = {}
        self.phase1_started_ns = 0
        self.next_unused = 0
        self.any_start: Optional[int] = None
        self.assigned: Dict[int, int] = {}
        self.instance_values: Dict[int, Value] = {}
        self.recoveries: Dict[int, Recovery] = {}
        self.waiting: List[Message] = []

    @property
    def kind(self) -> RoundKind:
        return RoundKind.FAST if self.fast_rounds else RoundKind.CLASSIC

    def begin(self, max_counter: int, window: InstanceWindow, now: int) -> Message:
        self.round = RoundId(max_counter + 1, self.me, self.kind)
        self.active = False
        self.replies = {}
        self.phase1_started_ns = now
        return factorize_phase1(self.round, window)[0]

    def resign(self) -> None:
        self.round = None
        self.active = False
        self.replies = {}
        self.waiting = []
        self.recoveries = {}

    def on_phase1b(self, m: Message, window: InstanceWindow, pending: Dict[int, Value]) -> Optional[Phase1Result]:
        if self.active or self.round is None or m.round != self.round:
            return None
        try:
            watermark, votes = decode_reports(m.payload)
        except DecodeError as e:
            logger.warning("bad phase 1b report from r%d: %s", m.sender, e)
            return None
        if m.sender in self.replies:
            return None
        self.replies[m.sender] = (watermark, votes)
        if len(self.replies) < self.quorum.classic_size:
            return None
        return self._complete(window, pending)

    def _complete(self, window: InstanceWindow, pending: Dict[int, Value]) -> Phase1Result:
        ahead = max(self.replies, key=lambda r: (self.replies[r][0], -r))
        top = max(self.replies[ahead][0], window.delivered)
        if self.replies[ahead][0] <= window.delivered:
            ahead = None

        tallies: Dict[int, CoordinatorTally] = {}
        for sender, (_, votes) in sorted(self.replies.items()):
            for v in votes:
                if v.instance >= top:
                    tally = tallies.setdefault(v.instance, CoordinatorTally(strict=self.strict))
                    tally.add_reply(sender, (v.round, v.value))
        for tally in tallies.values():
            for sender in self.replies:
                tally.replies.setdefault(sender, None)

        highest = max(tallies) if tallies else top - 1
        messages = []
        for i in range(top, highest + 1):
            tally = tallies.get(i)
            if i in window.decided:
                value = window.decided[i]
            elif tally is not None:
                value = coordinator_pick_value(tally, self.quorum) or free_choice(tally)
            else:
                value = pending.get(i, NOOP)
            self.instance_values[i] = value
            messages.append(self._phase2a(i, self.round, value))

        self.next_unused = max(top, highest + 1)
        if self.fast_rounds:
            self.any_start = self.next_unused
            messages.append(self.any_message())
        self.active = True

        waiting, self.waiting = self.waiting, []
        for propose in waiting:
            messages.extend(self.on_propose(propose, window))
        return Phase1Result(messages, top, ahead)

    def any_message(self) -> Message:
        return Message(MessageKind.ANY, self.me, self.round, instance=self.any_start, limit=None)

    def _phase2a(self, instance: int, rnd: RoundId, value: Value) -> Message:
        return Message(MessageKind.PHASE2A, self.me, rnd, instance=instance,
                       digest=value.digest, payload=value.payload)

    def on_propose(self, m: Message, window: InstanceWindow) -> List[Message]:
        """Assigns the next unused instance to a proposal sent through the coordinator."""
        if self.round is None:
            return []
        if not self.active:
            self.waiting.append(m)
            return []
        batch_id = peek_batch_id(m.payload or b'')
        if batch_id is None:
            return []
        if batch_id in self.assigned or batch_id in window.delivered_batches:
            return []
        instance = max(self.next_unused, window.delivered)
        self.next_unused = instance + 1
        self.assigned[batch_id] = instance
        value = m.value
        self.instance_values[instance] = value
        return [self._phase2a(instance, self.round, value)]

    # --- Recovery rounds ---
    def recovering(self, instance: int, now: int) -> bool:
        rec = self.recoveries.get(instance)
        return rec is not None and now < rec.deadline_ns

    def start_recovery(self, instance: int, max_counter: int, now: int, deadline_ns: int) -> Message:
        base = RoundId(max_counter, self.me)
        if self.round is not None and self.round.counter > max_counter:
            base = self.round
        rnd = start_recovery_round(base, self.me)
        previous = self.recoveries.get(instance)
        attempts = previous.attempts + 1 if previous else 0
        self.recoveries[instance] = Recovery(instance, rnd, CoordinatorTally(round=rnd, strict=self.strict),
                                             now, deadline_ns, attempts)
        return Message(MessageKind.PHASE1A, self.me, rnd, instance=instance, limit=instance + 1)

    def on_recovery_phase1b(self, m: Message, fallback: Optional[Value]) -> Optional[Message]:
        rec = self.recoveries.get(m.instance)
        if rec is None or rec.sent or m.round != rec.round:
            return None
        rec.tally.add_reply(m.sender, reported_vote(m))
        if len(rec.tally.replies) < self.quorum.classic_size:
            return None
        value = coordinator_pick_value(rec.tally, self.quorum) or free_choice(rec.tally)
        if value is None:
            value = self.instance_values.get(m.instance) or fallback or NOOP
        rec.sent = True
        self.instance_values[m.instance] = value
        return self._phase2a(m.instance, rec.round, value)

    def finish(self, instance: int) -> None:
        self.recoveries.pop(instance, None)
        self.instance_values.pop(instance, None)

    def on_decided(self, instance: int, value: Value) -> None:
        """Frees assignments to an instance that went to another batch, so a resend is placed again."""
        decided_id = None if value.is_noop else peek_batch_id(value.payload)
        for batch_id in [b for b, i in self.assigned.items() if i == instance and b != decided_id]:
            del self.assigned[batch_id]
        self.finish(instance)

    def forget_batches(self, batch_ids) -> None:
        for batch_id in batch_ids:
            self.assigned.pop(batch_id, None)
