"""
One replica: acceptor, learner, proposer and (when elected) coordinator,
driven by a single event loop.

The replica never touches a clock or a socket directly. A host object gives
it the time, sends messages and arms timers; SimHost plays that role in the
simulator and ReplicaRunner over UDP. Every handler ends by handing the
ledger changes it made to the group commit, which releases the handler's
outbound messages only once those changes are durable.
"""
import logging
from dataclasses import replace
from typing import Dict, List, Optional, Set

from config import EngineConfig
from hashtable import TableState, apply_all, read, state_digest
from ledger import (CatchUpClient, CatchUpServer, DecisionCache, GroupCommit, LedgerFile, StorageError,
                    decided_message, local_recover, max_record_body, recovery_time_ns)
from liveness import (ALERT, COLLISION, COORDINATOR_ONLY, FailureDetector, RECOVER, RetryCounters, TIMEOUT,
                      TimeoutPolicy, elect_coordinator, on_round_timeout, record_retry)
from models import (Command, LedgerRecord, Message, MessageKind, NO_INSTANCE, RecordTag, ReplicaId, RoundId,
                    Value, round_zero)
from protocol import Acceptor, Learner, detect_collision, reported_vote
from quorums import quorum_spec
from sequencer import Coordinator, InstanceWindow, Proposer, Ticket, record_decision
from utils import log_activity, us_to_ns

logger = logging.getLogger(__name__)

STARTING = 'starting'
RECOVERING = 'recovering'
RUNNING = 'running'
CRASHED = 'crashed'
FAILED = 'failed'

TICK = 'tick'
FLUSH = 'flush'
RECOVERED = 'recovered'
CATCHUP = 'catchup'


class ReplicaUnavailable(RuntimeError):
    """The replica is not accepting commands (recovering, crashed or failed)."""


class ReplicaObserver:
    """Hooks for the harness and the tests; every method is optional."""

    def proposed(self, replica: ReplicaId, instance: Optional[int], batch_id: int, value: Value, now: int) -> None:
        pass

    def voted(self, replica: ReplicaId, instance: int, rnd: RoundId, digest: bytes, now: int) -> None:
        pass

    def decided(self, replica: ReplicaId, instance: int, digest: bytes, now: int) -> None:
        pass

    def delivered(self, replica: ReplicaId, instance: int, batch, tickets: List[Ticket], now: int) -> None:
        pass

    def retried(self, replica: ReplicaId, instance: int, kind: str, now: int) -> None:
        pass

    def recovered(self, replica: ReplicaId, now: int) -> None:
        pass

    def rejoined(self, replica: ReplicaId, now: int) -> None:
        pass


class Replica:
    def __init__(self, me: ReplicaId, members: List[ReplicaId], config: EngineConfig, storage,
                 observer: Optional[ReplicaObserver] = None):
        self.me = me
        self.members = sorted(members)
        self.config = config
        self.storage = storage
        self.observer = observer or ReplicaObserver()
        self.quorum = quorum_spec(len(self.members), config.quorum_variant)
        self.policy = TimeoutPolicy.from_config(config)
        self.fast = config.fast_rounds
        self.host = None
        self.status = STARTING
        self.incarnation = 0
        self.started_ns = 0

        self.acceptor = Acceptor(me, hold_ns=self.policy.round_timeout_ns)
        self.learner = Learner(self.quorum, config.strict)
        self.window = InstanceWindow()
        self.table = TableState()
        self.coord = Coordinator(me, self.quorum, self.fast, config.strict)
        self.counters = RetryCounters()
        self.cache = DecisionCache(config.decision_cache_size)
        self.catchup_server = CatchUpServer(me, config.catchup_chunk)
        self.catchup: Optional[CatchUpClient] = None
        self.proposer: Optional[Proposer] = None
        self.ledger: Optional[LedgerFile] = None
        self.group: Optional[GroupCommit] = None
        self.detector: Optional[FailureDetector] = None

        self.coordinator: Optional[ReplicaId] = None
        self.coord_round: Optional[RoundId] = None
        self.max_counter = 0
        self.phase1_deadline = 0
        self.phase1_attempts = 0
        self.stalls: Dict[int, int] = {}
        self.stall_attempts: Dict[int, int] = {}
        self.collision_alerts: Set[int] = set()
        self.missing: Set[int] = set()
        self.peer_watermarks: Dict[ReplicaId, int] = {}
        self.progress = (0, 0)
        self.last_sent_ns = 0
        self.records: List[LedgerRecord] = []
        self._was_coordinator = False
        self._catchup_timer = False
        self.rejoining = False

    # --- Lifecycle ---
    def now(self) -> int:
        return self.host.now()

    def start(self, host) -> None:
        """Recovers from the ledger and joins the cluster."""
        self.host = host
        now = self.now()
        self.started_ns = now
        limit = max_record_body(self.config)
        self.ledger = LedgerFile(self.storage, limit)
        recovered = local_recover(self.ledger.repair(), limit)

        self.incarnation = recovered.incarnation + 1
        self.acceptor.restore(recovered.states, recovered.range_promises)
        self.window = recovered.window
        self.table = recovered.table
        for instance, value in recovered.window.decided.items():
            self.learner.decided[instance] = value.digest
            self.learner.observe(instance)
        self.max_counter = recovered.max_counter
        self._was_coordinator = recovered.highest_range is not None and recovered.highest_range.owner == self.me
        self.proposer = Proposer(self.me, self.incarnation, self.config.max_batch_commands,
                                 self.config.effective_pending_bound)
        self.group = GroupCommit(self.ledger, self.config.group_commit_ns)
        self.detector = FailureDetector(self.me, self.members, self.policy.election_timeout_ns, now)
        self.progress = (self.window.delivered, now)
        self.ledger.persist([LedgerRecord(RecordTag.INCARNATION, self.incarnation)])

        if self.incarnation > 1:
            self.status = RECOVERING
            delay = recovery_time_ns(recovered, self.me, self.config)
            log_activity('info', "Local recovery started", replica=self.me, incarnation=self.incarnation,
                         records=recovered.records, watermark=recovered.watermark, recovery_ns=delay)
            self.host.set_timer(delay, RECOVERED)
            return

        self.status = RUNNING
        self.coordinator = self.members[0]
        self.coord_round = round_zero(self.members[0])
        self.host.set_timer(self.policy.tick_ns, TICK)
        if self.coordinator == self.me:
            self._guarded(self._become_coordinator)

    def crash(self) -> List[Ticket]:
        """Stops the replica where it stands; returns the tickets that will never resolve."""
        self.status = CRASHED
        tickets = self.proposer.abandon_all() if self.proposer else []
        log_activity('warning', "Replica crashed", replica=self.me, lost_tickets=len(tickets))
        return tickets

    def _halt(self, error: Exception) -> None:
        self.status = FAILED
        if self.proposer:
            self.proposer.abandon_all()
        log_activity('error', "Storage failure, replica halted", replica=self.me, error=str(error))

    @property
    def running(self) -> bool:
        return self.status == RUNNING

    # --- Public operations ---
    def submit(self, command: Command) -> Ticket:
        if self.status != RUNNING:
            raise ReplicaUnavailable(f"replica r{self.me} is {self.status}")
        if self.rejoining:
            raise ReplicaUnavailable(f"replica r{self.me} is catching up")
        ticket = self.proposer.submit(command, self.now())
        self._guarded(self._seal)
        return ticket

    def use_classic_rounds(self) -> None:
        """
        Turns fast rounds off from here on. A replica holding the coordinator
        role opens a fresh classic round, which retires the Any it issued.
        """
        if not self.fast:
            return
        self.fast = False
        self.coord.fast_rounds = False
        self.policy = replace(self.policy, mode=COORDINATOR_ONLY)
        log_activity('info', "Fast rounds disabled", replica=self.me)
        if self.running and self.coord.round is not None:
            self._guarded(self._become_coordinator)

    def read(self, key: int) -> Optional[str]:
        return read(self.table, key)

    def state_digest(self) -> bytes:
        return state_digest(self.table)

    def status_dict(self) -> Dict[str, object]:
        return {
            'replica': self.me,
            'status': self.status,
            'rejoining': self.rejoining,
            'incarnation': self.incarnation,
            'coordinator': self.coordinator,
            'coordinating': self.coord.active,
            'round': repr(self.coord_round) if self.coord_round else None,
            'watermark': self.window.delivered,
            'decided': len(self.window.decided),
            'applied': self.table.applied_count,
            'digest': self.state_digest().hex(),
            'pending': self.proposer.pending if self.proposer else 0,
            'partial_conflicts': self.learner.partial_conflicts,
            'counters': self.counters.as_dict(),
        }

    # --- Event entry points ---
    def on_message(self, m: Message) -> None:
        if self.status != RUNNING:
            return
        self._guarded(self._dispatch, m)

    def on_timer(self, tag) -> None:
        if tag == RECOVERED and self.status == RECOVERING:
            self._guarded(self._finish_recovery)
        elif self.status == RUNNING:
            handler = {TICK: self._tick, FLUSH: self._flush, CATCHUP: self._catchup_burst}.get(tag)
            if handler is not None:
                self._guarded(handler)

    def _guarded(self, fn, *args) -> None:
        try:
            fn(*args)
            self._end_event()
        except StorageError as e:
            self._halt(e)

    # --- Output path ---
    def _emit(self, dst: Optional[ReplicaId], m: Message) -> None:
        """Queues a message; dst None broadcasts."""
        self.group.emit(dst, m)

    def _end_event(self) -> None:
        records = self.acceptor.drain_records() + self.records
        self.records = []
        out, arm = self.group.end_event(records)
        if arm:
            self.host.set_timer(self.group.window_ns, FLUSH)
        self._release(out)

    def _flush(self) -> None:
        self._release(self.group.on_flush())

    def _release(self, out) -> None:
        if not out:
            return
        now = self.now()
        for dst, m in out:
            if m.kind == MessageKind.PHASE2B:
                self.observer.voted(self.me, m.instance, m.round, m.digest, now)
            if dst is None:
                self.host.broadcast(m)
            else:
                self.host.send(dst, m)
        self.last_sent_ns = now

    # --- Dispatch ---
    def _dispatch(self, m: Message) -> None:
        now = self.now()
        self.detector.heard(m.sender, now)
        self.max_counter = max(self.max_counter, m.round.counter)
        if m.vote_round is not None:
            self.max_counter = max(self.max_counter, m.vote_round.counter)
        handler = {
            MessageKind.PHASE1A: self._on_phase1a,
            MessageKind.PHASE1B: self._on_phase1b,
            MessageKind.PHASE2A: self._on_phase2a,
            MessageKind.ANY: self._on_any,
            MessageKind.PHASE2B: self._on_phase2b,
            MessageKind.PROPOSE: self._on_propose,
            MessageKind.DECIDED: self._on_decided_message,
            MessageKind.CATCHUP_REQUEST: self._on_catchup_request,
            MessageKind.CATCHUP_REPLY: self._on_catchup_reply,
            MessageKind.ALERT: self._on_alert,
            MessageKind.HEARTBEAT: self._on_heartbeat,
        }[m.kind]
        handler(m)

    def _adopt(self, rnd: RoundId) -> None:
        """Follows the owner of the highest round seen."""
        if rnd.counter == 0 or (self.coord_round is not None and rnd <= self.coord_round):
            return
        self.coord_round = rnd
        if rnd.owner == self.me:
            return
        if self.coord.round is not None:
            log_activity('info', "Coordinator stepping down", replica=self.me, successor=rnd.owner)
            self.coord.resign()
        changed = self.coordinator != rnd.owner
        if changed:
            log_activity('info', "Coordinator adopted", replica=self.me, coordinator=rnd.owner,
                         round=repr(rnd))
        self.coordinator = rnd.owner
        self.detector.heard(rnd.owner, self.now())
        if changed:
            self._repropose()

    def _believed_coordinator(self, m: Message) -> bool:
        """The sender takes this replica for the coordinator, which has lost its role."""
        return (m.round.owner == self.me and self.coord.round is None
                and self.coordinator in (None, self.me))

    def _on_phase1a(self, m: Message) -> None:
        if m.sender == self.me:
            # applied locally when the round started
            return
        if not m.is_range and m.instance in self.window.decided:
            self._emit(m.sender, decided_message(self.me, m.instance, self.window.decided[m.instance]))
            return
        reply = self.acceptor.on_phase1a(m, self.window.delivered)
        if reply is not None:
            self._emit(m.sender, reply)
            self._adopt(m.round)

    def _on_phase1b(self, m: Message) -> None:
        if m.is_range:
            self._on_range_phase1b(m)
            return
        value = reported_vote(m)
        if value is not None:
            self.learner.remember(value[1])
        phase2a = self.coord.on_recovery_phase1b(m, None)
        if phase2a is not None:
            self.learner.remember(phase2a.value)
            self._emit(None, phase2a)

    def _on_range_phase1b(self, m: Message) -> None:
        result = self.coord.on_phase1b(m, self.window, {})
        if result is None:
            return
        self.phase1_attempts = 0
        for out in result.messages:
            if out.kind == MessageKind.PHASE2A:
                self.learner.remember(out.value)
            self._emit(None, out)
        log_activity('info', "Coordinator active", replica=self.me, round=repr(self.coord.round),
                     watermark=result.watermark)
        if result.ahead is not None:
            self._request_catch_up(result.ahead)
        self._repropose()

    def _on_phase2a(self, m: Message) -> None:
        self._adopt(m.round)
        self.learner.remember(m.value)
        self.learner.observe(m.instance)
        if m.instance < self.window.delivered or m.instance in self.window.decided:
            return
        vote = self.acceptor.on_phase2a(m)
        if vote is not None:
            self._emit(None, vote)
            self._watch(m.instance)

    def _on_any(self, m: Message) -> None:
        votes = self.acceptor.on_any(m, self.now())
        for vote in votes:
            self._emit(None, vote)
            self._watch(vote.instance)
        grant = self.acceptor.any_grant
        if grant is not None and grant[1] == m.round:
            self._adopt(m.round)
            if self._awaiting_proposal():
                self._propose()

    def _on_phase2b(self, m: Message) -> None:
        self._adopt(m.round)
        if m.instance < self.window.delivered:
            return
        digest = self.learner.on_vote(m)
        if digest is not None:
            self._on_decided(m.instance, digest)
            return
        if not m.round.is_fast or m.instance in self.learner.decided:
            return
        tally = self.learner.tallies.get(m.instance)
        if tally is None or not detect_collision(tally, self.quorum, len(self.detector.alive(self.now())), m.round):
            return
        # a split fast round cannot finish: recover without waiting for the timeout
        if self.coordinator == self.me:
            if not self.coord.recovering(m.instance, self.now()):
                self._recover(m.instance)
        elif self.coordinator is not None and m.instance not in self.collision_alerts:
            self.collision_alerts.add(m.instance)
            self._alert(m.instance)

    def _on_propose(self, m: Message) -> None:
        self.learner.remember(m.value)
        if m.instance == NO_INSTANCE:
            if self._believed_coordinator(m) and m.round.counter > 0:
                self._become_coordinator()
            if self.coord.round is not None:
                for out in self.coord.on_propose(m, self.window):
                    self._emit(None, out)
            return
        self._adopt(m.round)
        self.learner.observe(m.instance)
        if m.instance < self.window.delivered or m.instance in self.window.decided:
            return
        vote = self.acceptor.on_propose(m, self.now())
        if vote is not None:
            self._emit(None, vote)
            self._watch(m.instance)

    def _on_decided_message(self, m: Message) -> None:
        value = m.value or Value(m.digest, b'')
        if self.catchup is not None and m.sender == self.catchup.peer:
            self.catchup.deadline_ns = self.now() + 2 * self.policy.round_timeout_ns
        if m.instance < self.window.delivered:
            return
        if m.instance in self.missing and m.payload is not None:
            self.learner.remember(value)
            self.missing.discard(m.instance)
            self._deliver(m.instance, value)
            return
        digest = self.learner.on_decided(m.instance, value)
        if digest is not None:
            self._on_decided(m.instance, digest)

    def _on_alert(self, m: Message) -> None:
        self.counters.alerts_received += 1
        if m.instance in self.window.decided:
            self._emit(m.sender, decided_message(self.me, m.instance, self.window.decided[m.instance]))
            return
        if self.coordinator != self.me and self._believed_coordinator(m):
            self._become_coordinator()
        if self.coordinator != self.me:
            return
        if not self.coord.recovering(m.instance, self.now()):
            self._recover(m.instance)

    def _on_heartbeat(self, m: Message) -> None:
        if m.sender == self.me:
            return
        self.peer_watermarks[m.sender] = m.instance
        self._adopt(m.round)
        if self._believed_coordinator(m) and m.round.counter > 0:
            log_activity('info', "Resuming coordination", replica=self.me, requested_by=m.sender)
            self._become_coordinator()

    # --- Catch-up ---
    def _on_catchup_request(self, m: Message) -> None:
        self.catchup_server.start(m.sender, m.instance)
        if not self._catchup_timer:
            self._catchup_timer = True
            self.host.set_timer(0, CATCHUP)

    def _catchup_burst(self) -> None:
        """
        Relays one chunk per requester. Reading back and re-sending each
        decision keeps this event loop busy; the next chunk waits one turn
        so live traffic queued meanwhile goes first.
        """
        self._catchup_timer = False
        cache = self.cache if self.coord.active else None
        out = self.catchup_server.burst(self.window, cache)
        for dst, m in out:
            self._emit(dst, m)
        relayed = sum(1 for _, m in out if m.kind == MessageKind.DECIDED)
        cost = relayed * us_to_ns(self.config.catchup_relay_us)
        if cost:
            self.host.occupy(cost)
        if self.catchup_server.busy:
            self._catchup_timer = True
            self.host.set_timer(cost + 1, CATCHUP)

    def _on_catchup_reply(self, m: Message) -> None:
        self.peer_watermarks[m.sender] = m.instance
        client = self.catchup
        if client is None or client.peer != m.sender:
            return
        if self.window.delivered >= m.instance and not self.missing:
            log_activity('info', "Catch-up complete", replica=self.me, peer=m.sender,
                         watermark=self.window.delivered)
            self.catchup = None
            if self.rejoining:
                self._rejoin()
        else:
            client.deadline_ns = self.now()

    def _request_catch_up(self, peer: Optional[ReplicaId] = None) -> None:
        now = self.now()
        previous = self.catchup
        if peer is None:
            if previous is not None and now < previous.deadline_ns:
                return
            tried = previous.tried if previous is not None else []
            ahead = sorted((r for r, wm in self.peer_watermarks.items()
                            if wm > self.window.delivered and r != self.me),
                           key=lambda r: (-self.peer_watermarks[r], r))
            candidates = []
            if self.coordinator is not None and self.coordinator != self.me:
                candidates.append(self.coordinator)
            candidates += ahead + [r for r in self.members if r != self.me]
            fresh = [r for r in candidates if r not in tried]
            if not fresh:
                tried = []
                fresh = candidates
            if not fresh:
                return
            peer = fresh[0]
        else:
            tried = []
        if peer == self.me:
            return
        target = self.peer_watermarks.get(peer, self.window.delivered)
        self.catchup = CatchUpClient(peer, self.window.delivered, now + 2 * self.policy.round_timeout_ns,
                                     target, tried + [peer])
        self._emit(peer, Message(MessageKind.CATCHUP_REQUEST, self.me, round_zero(self.me),
                                 instance=self.window.delivered))

    # --- Decisions ---
    def _on_decided(self, instance: int, digest: bytes) -> None:
        self.stalls.pop(instance, None)
        self.stall_attempts.pop(instance, None)
        self.collision_alerts.discard(instance)
        self.counters.total_instances += 1
        self.observer.decided(self.me, instance, digest, self.now())
        value = self.learner.resolve(digest)
        if value is None:
            self.missing.add(instance)
            self._request_catch_up()
            return
        self._deliver(instance, value)

    def _deliver(self, instance: int, value: Value) -> None:
        now = self.now()
        self.records.append(LedgerRecord(RecordTag.DECIDED, instance, None, value))
        if self.coord.round is not None:
            self.coord.on_decided(instance, value)
            self.cache.put(instance, value)
        for i, batch in record_decision(instance, value, self.window):
            apply_all(self.table, batch.commands)
            tickets = self.proposer.on_delivered(batch.batch_id, i, now)
            if self.coord.round is not None:
                self.coord.forget_batches([batch.batch_id])
            self.observer.delivered(self.me, i, batch, tickets, now)

        flight = self.proposer.in_flight
        if flight is not None and flight.instance == instance and value.digest != flight.value.digest:
            # lost the instance: the same batch goes into a fresh one
            flight.instance = None
            self._propose()
        self._seal()

    # --- Proposing ---
    def _seal(self) -> None:
        if self.proposer.seal(self.now()) is not None:
            self._propose()

    def _propose(self) -> None:
        flight = self.proposer.in_flight
        if flight is None:
            return
        now = self.now()
        value = flight.value
        self.learner.remember(value)

        if self.fast:
            grant = self.acceptor.any_grant
            if grant is None:
                return
            instance = max(grant[0], self.window.delivered, self.learner.highest_seen + 1)
            flight.instance = instance
            flight.sent_ns = now
            flight.attempts += 1
            self.learner.observe(instance)
            self.observer.proposed(self.me, instance, flight.batch.batch_id, value, now)
            self._emit(None, Message(MessageKind.PROPOSE, self.me, grant[1], instance=instance,
                                     digest=value.digest, payload=value.payload))
            self._watch(instance)
            return

        if self.coordinator is None:
            return
        m = Message(MessageKind.PROPOSE, self.me, self.coord_round or round_zero(self.me), instance=NO_INSTANCE,
                    digest=value.digest, payload=value.payload)
        flight.sent_ns = now
        flight.attempts += 1
        self.observer.proposed(self.me, None, flight.batch.batch_id, value, now)
        if self.coordinator == self.me:
            for out in self.coord.on_propose(m, self.window):
                self._emit(None, out)
        else:
            self._emit(self.coordinator, m)

    def _repropose(self) -> None:
        """A batch sent to a failed coordinator goes to the new one without waiting out its backoff."""
        flight = self.proposer.in_flight if self.proposer else None
        if self.fast or flight is None or flight.attempts == 0:
            return
        flight.attempts = 0
        self._propose()

    def _awaiting_proposal(self) -> bool:
        """A sealed batch that is not currently proposed anywhere."""
        flight = self.proposer.in_flight
        if flight is None:
            return False
        if self.fast:
            return flight.instance is None
        return flight.attempts == 0

    # --- Coordination ---
    def _become_coordinator(self) -> None:
        now = self.now()
        m = self.coord.begin(self.max_counter, self.window, now)
        self.max_counter = m.round.counter
        self.coordinator = self.me
        self.coord_round = m.round
        self.phase1_deadline = now + self.policy.backoff_ns(self.phase1_attempts)
        self.phase1_attempts += 1
        self.cache.rebuild(self.window)
        reply = self.acceptor.on_phase1a(m, self.window.delivered)
        if reply is None:
            self.coord.resign()
            self.coordinator = None
            return
        log_activity('info', "Starting phase 1", replica=self.me, round=repr(m.round), start=m.instance)
        self._emit(None, m)
        self._on_range_phase1b(reply)

    def _recover(self, instance: int) -> None:
        now = self.now()
        tally = self.learner.tallies.get(instance)
        collided = tally is not None and detect_collision(tally, self.quorum, len(self.detector.alive(now)))
        kind = COLLISION if collided else TIMEOUT
        record_retry(kind, self.counters, instance)
        attempts = self.stall_attempts.get(instance, 0)
        m = self.coord.start_recovery(instance, self.max_counter, now, now + self.policy.backoff_ns(attempts))
        self.max_counter = max(self.max_counter, m.round.counter)
        self.observer.retried(self.me, instance, kind, now)
        logger.debug("r%d recovering instance %d in %r (%s)", self.me, instance, m.round, kind)
        reply = self.acceptor.on_phase1a(m, self.window.delivered)
        self._emit(None, m)
        if reply is not None:
            self._on_phase1b(reply)

    def _alert(self, instance: int) -> None:
        tally = self.learner.tallies.get(instance)
        rounds = [r for r, _ in tally.votes2b.values()] if tally is not None else []
        rnd = max(rounds) if rounds else (self.coord_round or round_zero(self.me))
        self.counters.alerts_sent += 1
        self._emit(self.coordinator, Message(MessageKind.ALERT, self.me, rnd, instance=instance))

    def _watch(self, instance: int) -> None:
        if instance not in self.stalls and instance not in self.window.decided:
            self.stalls[instance] = self.now() + self.policy.round_timeout_ns

    # --- Timers ---
    def _finish_recovery(self) -> None:
        now = self.now()
        self.status = RUNNING
        self.detector.reset(now)
        self.progress = (self.window.delivered, now)
        if self._was_coordinator:
            self.cache.rebuild(self.window)
        log_activity('info', "Local recovery complete", replica=self.me, watermark=self.window.delivered)
        self.observer.recovered(self.me, now)
        self._heartbeat()
        self.host.set_timer(self.policy.tick_ns, TICK)
        # commands wait until the missed decisions are in
        self.rejoining = True
        self._request_catch_up()

    def _rejoin(self) -> None:
        self.rejoining = False
        log_activity('info', "Replica rejoined", replica=self.me, watermark=self.window.delivered)
        self.observer.rejoined(self.me, self.now())

    def _check_rejoin(self, now: int) -> None:
        if self.rejoining and (self.catchup is None or now >= self.catchup.deadline_ns):
            self._request_catch_up()

    def _tick(self) -> None:
        now = self.now()
        self.acceptor.expire_held(now)
        self._check_coordinator(now)
        self._check_stalls(now)
        self._check_gaps(now)
        self._check_proposal(now)
        self._check_phase1(now)
        self._check_rejoin(now)
        if now - self.last_sent_ns >= self.policy.heartbeat_interval_ns:
            self._heartbeat()
        self.learner.forget_below(self.window.delivered)
        self.acceptor.forget_below(self.window.delivered)
        self.host.set_timer(self.policy.tick_ns, TICK)

    def _heartbeat(self) -> None:
        if self.fast and self.coord.active:
            self._emit(None, self.coord.any_message())
            return
        self._emit(None, Message(MessageKind.HEARTBEAT, self.me, self.coord_round or round_zero(self.me),
                                 instance=self.window.delivered))

    def _check_coordinator(self, now: int) -> None:
        current = self.coordinator
        if current == self.me:
            return
        if current is not None and self.detector.silent_for(current, now) < self.policy.election_timeout_ns:
            return
        if current is None and now - self.started_ns < self.policy.election_timeout_ns:
            return
        alive = self.detector.alive(now) - ({current} if current is not None else set())
        winner = elect_coordinator(alive)
        log_activity('warning', "Coordinator suspected", replica=self.me, suspected=current, elected=winner)
        if winner == self.me:
            self._become_coordinator()
        else:
            self.coordinator = winner
            self.detector.heard(winner, now)

    def _check_stalls(self, now: int) -> None:
        for instance in sorted(self.stalls):
            if instance in self.window.decided or instance < self.window.delivered:
                self.stalls.pop(instance)
                self.stall_attempts.pop(instance, None)
                continue
            if now < self.stalls[instance]:
                continue
            attempts = self.stall_attempts.get(instance, 0)
            action = on_round_timeout(instance, self.policy, self.me, self.coordinator)
            if action == RECOVER:
                if not self.coord.recovering(instance, now):
                    self._recover(instance)
            elif action == ALERT:
                self._alert(instance)
            self.stall_attempts[instance] = attempts + 1
            self.stalls[instance] = now + self.policy.backoff_ns(attempts + 1)

    def _check_gaps(self, now: int) -> None:
        delivered = self.window.delivered
        best_peer = max(self.peer_watermarks.values(), default=0)
        gap = self.window.max_decided > delivered
        if not (self.missing or gap or best_peer > delivered):
            self.progress = (delivered, now)
            return
        if delivered != self.progress[0]:
            self.progress = (delivered, now)
            return
        if now - self.progress[1] < self.policy.round_timeout_ns:
            return
        self._request_catch_up()
        if gap:
            self._watch(delivered)

    def _check_proposal(self, now: int) -> None:
        flight = self.proposer.in_flight
        if flight is None:
            return
        if self._awaiting_proposal():
            self._propose()
        elif not self.fast and now - flight.sent_ns >= self.policy.backoff_ns(flight.attempts - 1):
            self._propose()

    def _check_phase1(self, now: int) -> None:
        if self.coord.round is None or self.coord.active or now < self.phase1_deadline:
            return
        log_activity('warning', "Phase 1 timed out, retrying", replica=self.me, round=repr(self.coord.round))
        self._become_coordinator()
