"""
Ledger persistence

Every promise, vote and decision of a replica is appended to its ledger
before any message that depends on it leaves the replica. The file is a
16-byte header followed by records:

    u32 length | u8 tag | u64 instance | payload | u32 crc32(tag..payload)

All integers are little-endian. A torn final record (short or failing its
checksum) is the normal result of a crash and is discarded on recovery;
a bad record anywhere else means the file is corrupt.
"""
import logging
import os
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

from config import EngineConfig
from hashtable import TableState, apply_all
from models import LedgerRecord, Message, MessageKind, RecordTag, ReplicaId, RoundId, RoundKind, Value, max_round, round_zero
from protocol import AcceptorState, EMPTY_STATE
from sequencer import InstanceWindow, record_decision
from utils import DIGEST_SIZE, log_activity, us_to_ns

logger = logging.getLogger(__name__)

MAGIC = b'FPXLEDGR'
FORMAT_VERSION = 1
EXIT_CORRUPT = 3

_FILE_HEADER = struct.Struct('<8sH6x')
_U32 = struct.Struct('<I')
_BODY_HEAD = struct.Struct('<BQ')
_ROUND = struct.Struct('<QHB')

RECOVERY_BASE_NS = 1_000_000


class StorageError(RuntimeError):
    """The storage device failed; the replica must stop."""


class LedgerCorruptError(RuntimeError):
    """A non-final record failed its checksum."""
    exit_code = EXIT_CORRUPT


# --- Storage backends ---
class MemoryStorage:
    """
    Simulated disk. Bytes become durable only on flush(); crash() throws away
    whatever was appended since the last flush. Flush boundaries are kept so
    tests can enumerate every possible crash point.
    """

    def __init__(self, data: bytes = b''):
        self.durable = bytearray(data)
        self.pending = bytearray()
        self.flush_points: List[int] = []
        self.fail = False

    def size(self) -> int:
        return len(self.durable) + len(self.pending)

    def append(self, data: bytes) -> None:
        self.pending += data

    def flush(self) -> None:
        if self.fail:
            raise StorageError("simulated device failure")
        if self.pending:
            self.durable += self.pending
            self.pending = bytearray()
        self.flush_points.append(len(self.durable))

    def read(self) -> bytes:
        return bytes(self.durable) + bytes(self.pending)

    def truncate(self, size: int) -> None:
        self.pending = bytearray()
        del self.durable[size:]

    def crash(self) -> None:
        self.pending = bytearray()

    def prefix(self, size: int) -> 'MemoryStorage':
        return MemoryStorage(bytes(self.durable[:size]))


class FileStorage:
    """Append-only file; flush() is an fsync."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            self.fd = os.open(self.path, os.O_RDWR | os.O_CREAT | os.O_APPEND, 0o644)
        except OSError as e:
            raise StorageError(f"cannot open ledger {self.path}: {e}") from e

    def size(self) -> int:
        return os.fstat(self.fd).st_size

    def append(self, data: bytes) -> None:
        try:
            os.write(self.fd, data)
        except OSError as e:
            raise StorageError(f"write to {self.path} failed: {e}") from e

    def flush(self) -> None:
        try:
            os.fsync(self.fd)
        except OSError as e:
            raise StorageError(f"fsync of {self.path} failed: {e}") from e

    def read(self) -> bytes:
        with open(self.path, 'rb') as handle:
            return handle.read()

    def truncate(self, size: int) -> None:
        try:
            os.truncate(self.path, size)
        except OSError as e:
            raise StorageError(f"cannot truncate {self.path}: {e}") from e

    def crash(self) -> None:
        self.close()

    def close(self) -> None:
        if self.fd >= 0:
            os.close(self.fd)
            self.fd = -1


# --- Record codec ---
def _pack_round(rnd: RoundId) -> bytes:
    return _ROUND.pack(rnd.counter, rnd.owner, int(rnd.kind))


def _unpack_round(body: bytes, offset: int) -> RoundId:
    counter, owner, kind = _ROUND.unpack_from(body, offset)
    return RoundId(counter, owner, RoundKind(kind))


def encode_record(rec: LedgerRecord) -> bytes:
    payload = b''
    if rec.tag in (RecordTag.PROMISE, RecordTag.RANGE_PROMISE, RecordTag.VOTE):
        payload += _pack_round(rec.round)
    if rec.tag in (RecordTag.VOTE, RecordTag.DECIDED):
        payload += rec.value.digest + rec.value.payload
    body = _BODY_HEAD.pack(int(rec.tag), rec.instance) + payload
    return _U32.pack(len(body)) + body + _U32.pack(zlib.crc32(body))


def _decode_body(body: bytes) -> LedgerRecord:
    tag, instance = _BODY_HEAD.unpack_from(body, 0)
    tag = RecordTag(tag)
    offset = _BODY_HEAD.size
    rnd = None
    value = None
    if tag in (RecordTag.PROMISE, RecordTag.RANGE_PROMISE, RecordTag.VOTE):
        rnd = _unpack_round(body, offset)
        offset += _ROUND.size
    if tag in (RecordTag.VOTE, RecordTag.DECIDED):
        digest = body[offset:offset + DIGEST_SIZE]
        value = Value(bytes(digest), bytes(body[offset + DIGEST_SIZE:]))
    return LedgerRecord(tag, instance, rnd, value)


def file_header() -> bytes:
    return _FILE_HEADER.pack(MAGIC, FORMAT_VERSION)


def max_record_body(config: Optional[EngineConfig] = None) -> int:
    """Largest body a record can have: a vote carrying a full batch."""
    config = config or EngineConfig()
    return _BODY_HEAD.size + _ROUND.size + DIGEST_SIZE + config.max_batch_bytes


def _intact_record_at(data: bytes, offset: int, max_body: int) -> bool:
    if offset + _U32.size > len(data):
        return False
    (length,) = _U32.unpack_from(data, offset)
    end = offset + _U32.size + length + _U32.size
    if length < _BODY_HEAD.size or length > max_body or end > len(data):
        return False
    (crc,) = _U32.unpack_from(data, end - _U32.size)
    return zlib.crc32(data[offset + _U32.size:end - _U32.size]) == crc


def _check_torn(data: bytes, offset: int, max_body: int) -> None:
    """A torn record is the last write; any intact record after it means damage."""
    for later in range(offset + 1, len(data) - _BODY_HEAD.size):
        if _intact_record_at(data, later, max_body):
            raise LedgerCorruptError(f"damaged record at byte {offset} followed by intact data at byte {later}")


def decode_ledger(data: bytes, max_body: Optional[int] = None) -> Tuple[List[LedgerRecord], int]:
    """
    Returns the intact records and the byte length they occupy. Only the
    final record may be damaged; it is dropped as torn. A declared length
    over `max_body`, or damage with intact records behind it, raises
    LedgerCorruptError.
    """
    if max_body is None:
        max_body = max_record_body()
    if not data:
        return [], 0
    if len(data) < _FILE_HEADER.size:
        # a crash while writing the header leaves an empty ledger
        return [], 0
    magic, version = _FILE_HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise LedgerCorruptError("bad ledger magic")
    if version != FORMAT_VERSION:
        raise LedgerCorruptError(f"unsupported ledger version {version}")

    records = []
    offset = _FILE_HEADER.size
    while offset < len(data):
        if offset + _U32.size > len(data):
            break
        (length,) = _U32.unpack_from(data, offset)
        if length > max_body:
            raise LedgerCorruptError(f"record at byte {offset} declares {length} bytes")
        end = offset + _U32.size + length + _U32.size
        if end > len(data):
            _check_torn(data, offset, max_body)
            break
        body = data[offset + _U32.size:end - _U32.size]
        (crc,) = _U32.unpack_from(data, end - _U32.size)
        if zlib.crc32(body) != crc or length < _BODY_HEAD.size:
            if end == len(data):
                break
            raise LedgerCorruptError(f"checksum failure in record at byte {offset}")
        try:
            records.append(_decode_body(body))
        except (ValueError, struct.error) as e:
            raise LedgerCorruptError(f"undecodable record at byte {offset}: {e}") from e
        offset = end
    if offset < len(data):
        logger.warning("discarding torn ledger tail of %d bytes", len(data) - offset)
    return records, offset


class LedgerFile:
    def __init__(self, storage, max_body: Optional[int] = None):
        self.storage = storage
        self.max_body = max_body
        self.unflushed = 0
        self.flushes = 0
        self.flushed_records: List[int] = []
        if storage.size() == 0:
            storage.append(file_header())
            self.flush()

    def append(self, rec: LedgerRecord) -> None:
        self.storage.append(encode_record(rec))
        self.unflushed += 1

    def extend(self, records: List[LedgerRecord]) -> None:
        for rec in records:
            self.append(rec)

    def flush(self) -> int:
        """Makes every appended record durable; returns how many it covered."""
        count = self.unflushed
        self.storage.flush()
        self.unflushed = 0
        self.flushes += 1
        self.flushed_records.append(count)
        return count

    def persist(self, records: List[LedgerRecord]) -> int:
        self.extend(records)
        return self.flush()

    def read(self) -> bytes:
        return self.storage.read()

    def repair(self) -> bytes:
        """
        Cuts a torn tail off so new records follow the last intact one.
        Mid-file damage raises before anything is truncated.
        """
        data = self.storage.read()
        _, intact = decode_ledger(data, self.max_body)
        if _FILE_HEADER.size <= intact < len(data):
            self.storage.truncate(intact)
            data = data[:intact]
        return data


class GroupCommit:
    """
    Holds outbound messages while a flush is pending and releases them, in
    order, once the ledger is durable. With a zero window every event that
    wrote to the ledger flushes before its messages go out.
    """

    def __init__(self, ledger: LedgerFile, window_ns: int):
        self.ledger = ledger
        self.window_ns = window_ns
        self.outbox: List[Tuple[Optional[ReplicaId], Message]] = []
        self.flush_pending = False

    def emit(self, dst: Optional[ReplicaId], m: Message) -> None:
        self.outbox.append((dst, m))

    def _release(self):
        out, self.outbox = self.outbox, []
        return out

    def end_event(self, records: List[LedgerRecord]) -> Tuple[list, bool]:
        """Returns (messages to send now, whether a flush timer must be armed)."""
        self.ledger.extend(records)
        if self.ledger.unflushed:
            if self.window_ns <= 0:
                self.ledger.flush()
                return self._release(), False
            if not self.flush_pending:
                self.flush_pending = True
                return [], True
            return [], False
        if self.flush_pending:
            return [], False
        return self._release(), False

    def on_flush(self) -> list:
        if self.ledger.unflushed:
            self.ledger.flush()
        self.flush_pending = False
        return self._release()


# --- Recovery ---
@dataclass
class RecoveredState:
    incarnation: int = 0
    states: Dict[int, AcceptorState] = field(default_factory=dict)
    range_promises: List[Tuple[int, RoundId]] = field(default_factory=list)
    window: InstanceWindow = field(default_factory=InstanceWindow)
    table: TableState = field(default_factory=TableState)
    records: int = 0
    max_counter: int = 0
    highest_range: Optional[RoundId] = None

    @property
    def watermark(self) -> int:
        return self.window.delivered


def local_recover(data: bytes, max_body: Optional[int] = None) -> RecoveredState:
    """Rebuilds acceptor state, decisions and the application from ledger bytes."""
    records, _ = decode_ledger(data, max_body)
    state = RecoveredState(records=len(records))
    decided: Dict[int, Value] = {}

    for rec in records:
        if rec.tag == RecordTag.INCARNATION:
            state.incarnation = max(state.incarnation, rec.instance)
        elif rec.tag == RecordTag.PROMISE:
            current = state.states.get(rec.instance, EMPTY_STATE)
            state.states[rec.instance] = AcceptorState(max_round(current.promised, rec.round), current.last_vote)
        elif rec.tag == RecordTag.RANGE_PROMISE:
            state.range_promises = [(s, r) for s, r in state.range_promises if s < rec.instance]
            state.range_promises.append((rec.instance, rec.round))
            state.highest_range = max_round(state.highest_range, rec.round)
        elif rec.tag == RecordTag.VOTE:
            current = state.states.get(rec.instance, EMPTY_STATE)
            last = current.last_vote
            if last is None or rec.round > last[0]:
                last = (rec.round, rec.value)
            state.states[rec.instance] = AcceptorState(max_round(current.promised, rec.round), last)
        elif rec.tag == RecordTag.DECIDED:
            decided.setdefault(rec.instance, rec.value)
        if rec.round is not None:
            state.max_counter = max(state.max_counter, rec.round.counter)

    for instance in sorted(decided):
        for _, batch in record_decision(instance, decided[instance], state.window):
            apply_all(state.table, batch.commands)
    return state


def recovery_time_ns(recovered: RecoveredState, me: ReplicaId, config: EngineConfig) -> int:
    """
    Simulated local-recovery time. A replica that owned the highest range
    round was coordinating and also rebuilds its decision cache.
    """
    cost = RECOVERY_BASE_NS + recovered.records * us_to_ns(config.recover_record_us)
    if recovered.highest_range is not None and recovered.highest_range.owner == me:
        entries = min(config.decision_cache_size, len(recovered.window.decided))
        cost += entries * us_to_ns(config.recover_cache_entry_us)
    return cost


# --- Coordinator decision cache and catch-up ---
class DecisionCache:
    """Recently decided instances a coordinator keeps in memory for catch-up."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.entries: 'OrderedDict[int, Value]' = OrderedDict()
        self.hits = 0
        self.misses = 0

    def put(self, instance: int, value: Value) -> None:
        self.entries[instance] = value
        self.entries.move_to_end(instance)
        while len(self.entries) > self.capacity:
            self.entries.popitem(last=False)

    def get(self, instance: int) -> Optional[Value]:
        value = self.entries.get(instance)
        if value is None:
            self.misses += 1
        else:
            self.hits += 1
        return value

    def rebuild(self, window: InstanceWindow) -> int:
        self.entries.clear()
        for instance in sorted(window.decided)[-self.capacity:]:
            self.entries[instance] = window.decided[instance]
        return len(self.entries)

    def clear(self) -> None:
        self.entries.clear()


def decided_message(me: ReplicaId, instance: int, value: Value) -> Message:
    return Message(MessageKind.DECIDED, me, round_zero(me), instance=instance,
                   digest=value.digest, payload=value.payload)


def catch_up(missing_from: int, window: InstanceWindow, me: ReplicaId,
             cache: Optional[DecisionCache] = None, stop: Optional[int] = None) -> Iterator[Message]:
    """Decided messages for every decided instance from `missing_from` up to the peer's watermark."""
    end = window.delivered if stop is None else min(stop, window.delivered)
    for instance in range(missing_from, end):
        value = cache.get(instance) if cache is not None else None
        if value is None:
            value = window.decided.get(instance)
        if value is not None:
            yield decided_message(me, instance, value)


class CatchUpServer:
    """Streams decisions to recovering replicas in bursts."""

    def __init__(self, me: ReplicaId, chunk: int):
        self.me = me
        self.chunk = chunk
        self.sessions: Dict[ReplicaId, int] = {}

    @property
    def busy(self) -> bool:
        return bool(self.sessions)

    def start(self, requester: ReplicaId, from_instance: int) -> None:
        log_activity('info', "Catch-up requested", replica=self.me, peer=requester, start=from_instance)
        self.sessions[requester] = from_instance

    def burst(self, window: InstanceWindow, cache: Optional[DecisionCache] = None) -> List[Tuple[ReplicaId, Message]]:
        out = []
        for requester in sorted(self.sessions):
            start = self.sessions[requester]
            stop = min(window.delivered, start + self.chunk)
            for m in catch_up(start, window, self.me, cache, stop):
                out.append((requester, m))
            if stop >= window.delivered:
                out.append((requester, Message(MessageKind.CATCHUP_REPLY, self.me, round_zero(self.me),
                                               instance=window.delivered)))
                del self.sessions[requester]
            else:
                self.sessions[requester] = stop
        return out

    def clear(self) -> None:
        self.sessions.clear()


@dataclass
class CatchUpClient:
    peer: ReplicaId
    from_instance: int
    deadline_ns: int
    target: int = 0
    tried: List[ReplicaId] = field(default_factory=list)
