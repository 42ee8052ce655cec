"""
Message transport: a deterministic discrete-event model of a switched LAN,
and a UDP backend driven by a threaded runner.

Switch model: every message a host sends occupies its uplink for one
serialization slot (a broadcast is a single copy on the uplink). The switch
then queues one copy per destination port; each output port transmits its
queue in FIFO order, one serialization slot per copy, and the copy arrives
after the link latency. With the loopback fast path on, a host's own copy
of a broadcast is delivered immediately.
"""
import heapq
import itertools
import logging
import queue
import random
import socket
import threading
import time
from collections import defaultdict
from concurrent.futures import Future
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

from config import EngineConfig
from models import Message, ReplicaId
from utils import log_activity, us_to_ns
from wire import DecodeError, decode_message, encode_message

logger = logging.getLogger(__name__)

ENQUEUE = 'enqueue'
PORT_TRANSMIT = 'portTransmit'
DELIVER = 'deliver'
DROP = 'drop'

_A_ENQUEUE, _A_TRANSMIT, _A_DELIVER, _A_TIMER, _A_CALL = range(5)


class TransportError(RuntimeError):
    """Backend down, or a datagram over the payload cap."""


class SimulationLimitError(RuntimeError):
    """The event bound was exceeded; the run is presumed livelocked."""


@dataclass(frozen=True)
class SimNetConfig:
    link_latency_ns: int = 100_000
    serialization_ns: int = 5_000
    loss_prob: float = 0.0
    duplicate_prob: float = 0.0
    reorder_jitter_ns: int = 0
    loopback_fastpath: bool = True
    seed: int = 0
    max_events: int = 20_000_000
    record_trace: bool = True

    def __post_init__(self):
        if not 0.0 <= self.loss_prob <= 1.0:
            raise ValueError(f"loss probability out of range: {self.loss_prob}")
        if not 0.0 <= self.duplicate_prob <= 1.0:
            raise ValueError(f"duplicate probability out of range: {self.duplicate_prob}")

    @classmethod
    def from_engine(cls, config: EngineConfig, **overrides) -> 'SimNetConfig':
        values = dict(
            link_latency_ns=us_to_ns(config.link_latency_us),
            serialization_ns=us_to_ns(config.serialization_us),
            loss_prob=config.loss_prob,
            duplicate_prob=config.duplicate_prob,
            reorder_jitter_ns=us_to_ns(config.reorder_jitter_us),
            loopback_fastpath=config.loopback_fastpath,
            seed=config.seed,
        )
        values.update(overrides)
        return cls(**values)


@dataclass(frozen=True)
class SimEvent:
    time: int
    kind: str
    port: int
    seq: int
    src: int
    data: bytes = b''


class SimNetwork:
    """Single-threaded event loop; identical inputs yield identical traces."""

    def __init__(self, config: SimNetConfig = SimNetConfig()):
        self.config = config
        self.rng = random.Random(config.seed)
        self.clock = 0
        self._heap: List[tuple] = []
        self._seq = itertools.count()
        self._cancelled = set()
        self.handlers: Dict[ReplicaId, object] = {}
        self.alive: Dict[ReplicaId, bool] = {}
        self.epoch: Dict[ReplicaId, int] = defaultdict(int)
        self.uplink_free: Dict[ReplicaId, int] = defaultdict(int)
        self.port_free: Dict[ReplicaId, int] = defaultdict(int)
        self.busy_until: Dict[ReplicaId, int] = defaultdict(int)
        self.trace: List[SimEvent] = []
        self.events_processed = 0
        self.copies_enqueued = 0
        self.copies_delivered = 0
        self.copies_dropped = 0
        self.bytes_on_wire = 0
        self.fifo_inversions = 0
        self._pair_sent: Dict[Tuple[ReplicaId, ReplicaId], int] = defaultdict(int)
        self._pair_delivered: Dict[Tuple[ReplicaId, ReplicaId], int] = defaultdict(int)

    # --- Membership ---
    def attach(self, replica: ReplicaId, handler) -> 'SimHost':
        self.handlers[replica] = handler
        self.alive[replica] = True
        return SimHost(self, replica)

    @property
    def members(self) -> List[ReplicaId]:
        return sorted(self.handlers)

    def kill(self, replica: ReplicaId) -> None:
        self.alive[replica] = False
        self.epoch[replica] += 1
        self.busy_until[replica] = 0
        log_activity('warning', "Replica killed", replica=replica, at_ns=self.clock)

    def revive(self, replica: ReplicaId, handler) -> 'SimHost':
        self.epoch[replica] += 1
        self.busy_until[replica] = 0
        self.handlers[replica] = handler
        self.alive[replica] = True
        log_activity('info', "Replica restarted", replica=replica, at_ns=self.clock)
        return SimHost(self, replica)

    # --- Scheduling ---
    def _push(self, at: int, port: int, action: int, args: tuple) -> int:
        seq = next(self._seq)
        heapq.heappush(self._heap, (at, port, seq, action, args))
        return seq

    def _record(self, kind: str, port: int, src: int, data: bytes) -> None:
        if self.config.record_trace:
            self.trace.append(SimEvent(self.clock, kind, port, len(self.trace), src, data))

    def send(self, src: ReplicaId, dst: ReplicaId, data: bytes) -> None:
        self._transmit(src, [dst], data)

    def broadcast(self, src: ReplicaId, data: bytes) -> None:
        self._transmit(src, self.members, data)

    def _transmit(self, src: ReplicaId, dsts: List[ReplicaId], data: bytes) -> None:
        remote = []
        for dst in dsts:
            if dst == src and self.config.loopback_fastpath:
                self.copies_enqueued += 1
                self._push(self.clock, dst, _A_DELIVER, (src, dst, data, None))
            else:
                remote.append(dst)
        if not remote:
            return
        arrival = max(self.clock, self.uplink_free[src])
        self.uplink_free[src] = arrival + self.config.serialization_ns
        for dst in remote:
            self.copies_enqueued += 1
            self._pair_sent[(src, dst)] += 1
            self._push(arrival, dst, _A_ENQUEUE, (src, dst, data, self._pair_sent[(src, dst)]))

    def set_timer(self, owner: ReplicaId, delay_ns: int, tag) -> int:
        return self._push(self.clock + max(0, delay_ns), owner, _A_TIMER, (owner, self.epoch[owner], tag))

    def cancel_timer(self, token: int) -> None:
        self._cancelled.add(token)

    def call_at(self, at: int, fn: Callable[[], None], port: int = -1) -> None:
        self._push(max(at, self.clock), port, _A_CALL, (fn,))

    def occupy(self, replica: ReplicaId, span_ns: int) -> int:
        """
        Keeps the replica's event loop busy for span_ns: its deliveries and
        timers wait until then, in their original order.
        """
        self.busy_until[replica] = max(self.busy_until[replica], self.clock) + max(0, span_ns)
        return self.busy_until[replica]

    # --- Event processing ---
    def _on_enqueue(self, port: int, src: ReplicaId, data: bytes, order: int) -> None:
        self._record(ENQUEUE, port, src, data)
        if self.rng.random() < self.config.loss_prob:
            self.copies_dropped += 1
            self._record(DROP, port, src, data)
            return
        copies = 2 if self.rng.random() < self.config.duplicate_prob else 1
        if copies == 2:
            self.copies_enqueued += 1
        for _ in range(copies):
            jitter = self.rng.randint(0, self.config.reorder_jitter_ns) if self.config.reorder_jitter_ns else 0
            start = max(self.clock, self.port_free[port])
            self.port_free[port] = start + self.config.serialization_ns
            self._push(start, port, _A_TRANSMIT, (src, port, data, jitter, order))

    def _on_transmit(self, port: int, src: ReplicaId, data: bytes, jitter: int, order: int) -> None:
        self._record(PORT_TRANSMIT, port, src, data)
        self.bytes_on_wire += len(data)
        at = self.clock + self.config.serialization_ns + self.config.link_latency_ns + jitter
        self._push(at, port, _A_DELIVER, (src, port, data, order))

    def _on_deliver(self, src: ReplicaId, dst: ReplicaId, data: bytes, order: Optional[int]) -> None:
        handler = self.handlers.get(dst)
        if handler is None or not self.alive.get(dst, False):
            self.copies_dropped += 1
            self._record(DROP, dst, src, data)
            return
        try:
            message = decode_message(data)
        except DecodeError as e:
            logger.debug("dropping malformed datagram for r%d: %s", dst, e)
            self.copies_dropped += 1
            self._record(DROP, dst, src, data)
            return
        if order is not None:
            if order < self._pair_delivered[(src, dst)]:
                self.fifo_inversions += 1
            else:
                self._pair_delivered[(src, dst)] = order
        self.copies_delivered += 1
        self._record(DELIVER, dst, src, data)
        handler.on_message(message)

    def step(self) -> bool:
        if not self._heap:
            return False
        at, port, seq, action, args = heapq.heappop(self._heap)
        self.clock = at
        if action in (_A_DELIVER, _A_TIMER):
            owner = args[1] if action == _A_DELIVER else args[0]
            if self.busy_until[owner] > at:
                heapq.heappush(self._heap, (self.busy_until[owner], port, seq, action, args))
                return True
        self.events_processed += 1
        if action == _A_ENQUEUE:
            self._on_enqueue(port, args[0], args[2], args[3])
        elif action == _A_TRANSMIT:
            self._on_transmit(port, args[0], args[2], args[3], args[4])
        elif action == _A_DELIVER:
            self._on_deliver(*args)
        elif action == _A_TIMER:
            owner, epoch, tag = args
            if seq in self._cancelled:
                self._cancelled.discard(seq)
            elif self.alive.get(owner) and self.epoch[owner] == epoch:
                self.handlers[owner].on_timer(tag)
        elif action == _A_CALL:
            args[0]()
        return True

    def run(self, until: Optional[int] = None, stop: Optional[Callable[[], bool]] = None,
            max_events: Optional[int] = None) -> List[SimEvent]:
        """
        Processes events up to simulated time `until` (inclusive), until `stop`
        returns true, or until the queue is empty. Returns the trace entries
        recorded by this call.
        """
        bound = max_events or self.config.max_events
        first = len(self.trace)
        processed = 0
        while self._heap:
            if until is not None and self._heap[0][0] > until:
                self.clock = max(self.clock, until)
                break
            if stop is not None and stop():
                break
            self.step()
            processed += 1
            if processed > bound:
                raise SimulationLimitError(f"more than {bound} events without reaching the stop condition")
        else:
            if until is not None:
                self.clock = max(self.clock, until)
        return self.trace[first:]

    def run_until(self, t: Optional[int] = None) -> List[SimEvent]:
        """Runs to simulated time t, or to quiescence when t is None."""
        return self.run(until=t)

    @property
    def quiescent(self) -> bool:
        return not self._heap

    @property
    def fifo_in_force(self) -> bool:
        """
        Per-pair FIFO is guaranteed only without jitter; with it, runs count
        the copies that overtook an earlier one from the same sender.
        """
        return self.config.reorder_jitter_ns == 0

    def conservation_holds(self) -> bool:
        in_flight = sum(1 for entry in self._heap if entry[3] in (_A_ENQUEUE, _A_TRANSMIT, _A_DELIVER))
        return self.copies_enqueued == self.copies_delivered + self.copies_dropped + in_flight


class SimHost:
    """The replica-facing side of the simulator."""

    def __init__(self, net: SimNetwork, me: ReplicaId):
        self.net = net
        self.me = me

    def now(self) -> int:
        return self.net.clock

    def send(self, dst: ReplicaId, m: Message) -> None:
        self.net.send(self.me, dst, encode_message(m))

    def broadcast(self, m: Message) -> None:
        self.net.broadcast(self.me, encode_message(m))

    def set_timer(self, delay_ns: int, tag) -> int:
        return self.net.set_timer(self.me, delay_ns, tag)

    def cancel_timer(self, token: int) -> None:
        self.net.cancel_timer(token)

    def occupy(self, span_ns: int) -> None:
        self.net.occupy(self.me, span_ns)


# --- UDP backend ---
def parse_address(text: str) -> Tuple[str, int]:
    host, _, port = text.rpartition(':')
    if not host or not port.isdigit():
        raise ValueError(f"expected host:port, got {text!r}")
    return host, int(port)


class UdpTransport:
    """Unreliable datagrams; a broadcast is one datagram per peer."""

    def __init__(self, me: ReplicaId, bind: str, peers: Dict[ReplicaId, str], payload_cap: int):
        self.me = me
        self.bind = parse_address(bind)
        self.peers = {r: parse_address(a) for r, a in peers.items()}
        self.payload_cap = payload_cap
        self.sock: Optional[socket.socket] = None
        self.bytes_sent = 0

    def start(self) -> None:
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self.sock.bind(self.bind)
        self.sock.settimeout(0.05)
        logger.info("r%d listening on %s:%d", self.me, *self.bind)

    def send(self, dst: ReplicaId, data: bytes) -> None:
        if self.sock is None:
            raise TransportError("transport is not running")
        if len(data) > self.payload_cap:
            raise TransportError(f"datagram of {len(data)} bytes exceeds cap {self.payload_cap}")
        address = self.peers.get(dst)
        if address is None:
            raise TransportError(f"unknown peer r{dst}")
        try:
            self.sock.sendto(data, address)
            self.bytes_sent += len(data)
        except OSError as e:
            # best effort: a failed send is a lost datagram
            logger.debug("send to r%d failed: %s", dst, e)

    def broadcast(self, data: bytes) -> None:
        """
        A unicast fan-out: one sendto per peer in id order, no SO_BROADCAST.
        Every copy counts in bytes_sent, unlike the simulated switch, which
        carries one copy per port.
        """
        for peer in sorted(self.peers):
            if peer != self.me:
                self.send(peer, data)

    def recv(self) -> Optional[bytes]:
        if self.sock is None:
            raise TransportError("transport is not running")
        try:
            data, _ = self.sock.recvfrom(65535)
        except socket.timeout:
            return None
        return data

    def close(self) -> None:
        if self.sock is not None:
            self.sock.close()
            self.sock = None


class ReplicaRunner:
    """
    Drives a replica in real time over a UDP transport. One thread receives
    datagrams, one runs the event loop with a timer heap; everything else
    (submit, reads of status) goes through call(), which runs on the loop.
    """

    def __init__(self, me: ReplicaId, transport: UdpTransport):
        self.me = me
        self.transport = transport
        self.replica = None
        self.events: 'queue.Queue[tuple]' = queue.Queue()
        self.timers: List[Tuple[int, int, object]] = []
        self._tokens = itertools.count()
        self._cancelled = set()
        self._t0 = time.monotonic_ns()
        self._running = False
        self._threads: List[threading.Thread] = []

    # Host interface
    def now(self) -> int:
        return time.monotonic_ns() - self._t0

    def send(self, dst: ReplicaId, m: Message) -> None:
        if dst == self.me:
            self.events.put(('msg', m))
            return
        self.transport.send(dst, encode_message(m))

    def broadcast(self, m: Message) -> None:
        self.events.put(('msg', m))
        self.transport.broadcast(encode_message(m))

    def set_timer(self, delay_ns: int, tag) -> int:
        token = next(self._tokens)
        heapq.heappush(self.timers, (self.now() + max(0, delay_ns), token, tag))
        return token

    def cancel_timer(self, token: int) -> None:
        self._cancelled.add(token)

    def occupy(self, span_ns: int) -> None:
        """Real hosts pay relay costs for real; nothing is added here."""

    # Lifecycle
    def attach(self, replica) -> None:
        self.replica = replica

    def start(self) -> None:
        self.transport.start()
        self._running = True
        for target, name in ((self._receive_loop, 'recv'), (self._event_loop, 'loop')):
            thread = threading.Thread(target=target, name=f"r{self.me}-{name}", daemon=True)
            thread.start()
            self._threads.append(thread)
        self.call(lambda: self.replica.start(self)).result()

    def stop(self) -> None:
        self._running = False
        self.events.put(('stop', None))
        for thread in self._threads:
            thread.join(timeout=2)
        self.transport.close()

    @property
    def running(self) -> bool:
        return self._running

    def call(self, fn: Callable[[], object]) -> Future:
        future: Future = Future()
        self.events.put(('call', (fn, future)))
        return future

    def _receive_loop(self) -> None:
        while self._running:
            try:
                data = self.transport.recv()
            except TransportError:
                break
            if data is None:
                continue
            try:
                self.events.put(('msg', decode_message(data)))
            except DecodeError as e:
                logger.debug("dropping malformed datagram: %s", e)

    def _event_loop(self) -> None:
        while self._running:
            timeout = 0.05
            if self.timers:
                timeout = max(0.0, (self.timers[0][0] - self.now()) / 1e9)
            try:
                kind, payload = self.events.get(timeout=timeout)
            except queue.Empty:
                kind, payload = None, None
            try:
                if kind == 'msg':
                    self.replica.on_message(payload)
                elif kind == 'call':
                    fn, future = payload
                    try:
                        future.set_result(fn())
                    except Exception as e:
                        future.set_exception(e)
                elif kind == 'stop':
                    break
                self._fire_timers()
            except Exception as e:
                log_activity('error', "Replica event loop stopped", replica=self.me, error=str(e))
                self._running = False
                raise

    def _fire_timers(self) -> None:
        now = self.now()
        while self.timers and self.timers[0][0] <= now:
            _, token, tag = heapq.heappop(self.timers)
            if token in self._cancelled:
                self._cancelled.discard(token)
                continue
            self.replica.on_timer(tag)
