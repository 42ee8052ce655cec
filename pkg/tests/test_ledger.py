import pytest

from config import EngineConfig
from ledger import (CatchUpServer, DecisionCache, EXIT_CORRUPT, FileStorage, GroupCommit, LedgerCorruptError,
                    LedgerFile, MemoryStorage, StorageError, catch_up, decode_ledger, encode_record,
                    local_recover, recovery_time_ns)
from models import Batch, Command, LedgerRecord, Message, MessageKind, NOOP, RecordTag, RoundId, RoundKind, Value
from sequencer import InstanceWindow, record_decision
from wire import batch_value


def decision(i, key):
    return batch_value(Batch(1000 + i, 1, (Command(key, 'abcde'),)))


def sample_records():
    return [
        LedgerRecord(RecordTag.INCARNATION, 1),
        LedgerRecord(RecordTag.RANGE_PROMISE, 0, RoundId(1, 0, RoundKind.FAST)),
        LedgerRecord(RecordTag.PROMISE, 3, RoundId(2, 1)),
        LedgerRecord(RecordTag.VOTE, 3, RoundId(2, 1), Value.of(b'voted')),
        LedgerRecord(RecordTag.DECIDED, 0, None, decision(0, 7)),
        LedgerRecord(RecordTag.DECIDED, 1, None, NOOP),
    ]


def written(records):
    storage = MemoryStorage()
    ledger = LedgerFile(storage)
    ledger.persist(records)
    return storage


def test_records_read_back():
    records, end = decode_ledger(written(sample_records()).read())
    assert [r.tag for r in records] == [r.tag for r in sample_records()]
    assert records[3].value.payload == b'voted'
    assert records[1].round.kind == RoundKind.FAST
    assert records[5].value.is_noop


def test_torn_tail_is_discarded():
    storage = written(sample_records())
    data = storage.read()
    partial = encode_record(LedgerRecord(RecordTag.DECIDED, 2, None, decision(2, 9)))[:-5]
    records, end = decode_ledger(data + partial)
    assert len(records) == len(sample_records())
    assert end == len(data)

    # a full final record with a bad checksum is torn too
    bad_tail = bytearray(encode_record(LedgerRecord(RecordTag.INCARNATION, 2)))
    bad_tail[-1] ^= 0xFF
    assert len(decode_ledger(data + bytes(bad_tail))[0]) == len(sample_records())


def test_repair_truncates_torn_tail():
    storage = written(sample_records())
    intact = storage.read()
    storage.append(b'\x07\x00\x00')
    storage.flush()
    LedgerFile(storage).repair()
    assert storage.read() == intact


def test_corruption_before_the_tail():
    data = bytearray(written(sample_records()).read())
    data[16 + 4 + 2] ^= 0x55
    with pytest.raises(LedgerCorruptError) as exc:
        decode_ledger(bytes(data))
    assert exc.value.exit_code == EXIT_CORRUPT == 3


def test_damaged_length_mid_file_is_corrupt():
    storage = written(sample_records())
    original = storage.read()
    data = bytearray(original)
    data[16] = 0xFF  # first record now claims to run far past its neighbours
    damaged = MemoryStorage(bytes(data))
    with pytest.raises(LedgerCorruptError):
        decode_ledger(bytes(data))
    with pytest.raises(LedgerCorruptError):
        local_recover(bytes(data))
    with pytest.raises(LedgerCorruptError):
        LedgerFile(damaged).repair()
    assert damaged.read() == bytes(data)


def test_oversized_length_is_corrupt():
    data = bytearray(written(sample_records()).read())
    data[16 + 3] = 0x7F
    with pytest.raises(LedgerCorruptError):
        decode_ledger(bytes(data))
    # even as the final record
    last = bytearray(encode_record(LedgerRecord(RecordTag.INCARNATION, 2)))
    last[3] = 0x7F
    with pytest.raises(LedgerCorruptError):
        decode_ledger(written(sample_records()).read() + bytes(last))


def test_bad_magic():
    with pytest.raises(LedgerCorruptError):
        decode_ledger(b'NOTALEDGER' + bytes(20))


def test_local_recover_rebuilds_state():
    state = local_recover(written(sample_records()).read())
    assert state.incarnation == 1
    assert state.watermark == 2
    assert state.table.entries == {7: 'abcde'}
    assert state.states[3].promised == RoundId(2, 1)
    assert state.states[3].last_vote[1] == Value.of(b'voted')
    assert state.range_promises == [(0, RoundId(1, 0))]
    assert state.max_counter == 2


def test_recovery_time_grows_with_cache_rebuild():
    config = EngineConfig()
    state = local_recover(written(sample_records()).read())
    as_coordinator = recovery_time_ns(state, 0, config)
    as_follower = recovery_time_ns(state, 1, config)
    assert as_coordinator > as_follower > 0


def test_unflushed_records_are_lost_on_crash():
    storage = MemoryStorage()
    ledger = LedgerFile(storage)
    ledger.persist([LedgerRecord(RecordTag.INCARNATION, 1)])
    ledger.extend([LedgerRecord(RecordTag.DECIDED, 0, None, decision(0, 1))])
    storage.crash()
    assert [r.tag for r in decode_ledger(storage.read())[0]] == [RecordTag.INCARNATION]


def test_storage_failure_is_raised():
    storage = MemoryStorage()
    ledger = LedgerFile(storage)
    storage.fail = True
    ledger.extend([LedgerRecord(RecordTag.INCARNATION, 1)])
    with pytest.raises(StorageError):
        ledger.flush()


def test_file_storage(tmp_path):
    path = tmp_path / 'r0.ledger'
    storage = FileStorage(path)
    LedgerFile(storage).persist(sample_records())
    storage.close()
    reopened = FileStorage(path)
    assert local_recover(reopened.read()).watermark == 2
    reopened.close()


# --- Group commit ---
def test_messages_wait_for_the_flush():
    storage = MemoryStorage()
    group = GroupCommit(LedgerFile(storage), window_ns=1_000_000)
    vote = Message(MessageKind.PHASE2B, 1, RoundId(1, 0), instance=0)
    group.emit(None, vote)
    out, arm = group.end_event([LedgerRecord(RecordTag.INCARNATION, 1)])
    assert out == [] and arm
    group.emit(2, vote)
    assert group.end_event([]) == ([], False)
    released = group.on_flush()
    assert released == [(None, vote), (2, vote)]
    assert len(decode_ledger(storage.read())[0]) == 1


def test_zero_window_flushes_inline():
    group = GroupCommit(LedgerFile(MemoryStorage()), window_ns=0)
    m = Message(MessageKind.HEARTBEAT, 1, RoundId(0, 0))
    group.emit(None, m)
    assert group.end_event([LedgerRecord(RecordTag.INCARNATION, 1)]) == ([(None, m)], False)
    group.emit(None, m)
    assert group.end_event([]) == ([(None, m)], False)


# --- Catch-up ---
def decided_window(count):
    window = InstanceWindow()
    for i in range(count):
        record_decision(i, decision(i, i), window)
    return window


def test_catch_up_replays_missing_decisions():
    peer = decided_window(10)
    laggard = decided_window(4)
    for m in catch_up(laggard.delivered, peer, me=0):
        record_decision(m.instance, m.value, laggard)
    assert laggard.delivered == 10


def test_catch_up_server_sends_in_chunks():
    server = CatchUpServer(me=0, chunk=4)
    window = decided_window(10)
    server.start(3, from_instance=1)
    first = server.burst(window)
    assert [m.instance for _, m in first] == [1, 2, 3, 4]
    assert server.busy
    server.burst(window)
    last = server.burst(window)
    assert last[-1][1].kind == MessageKind.CATCHUP_REPLY
    assert last[-1][1].instance == 10
    assert not server.busy


def test_decision_cache_is_bounded():
    cache = DecisionCache(capacity=3)
    assert cache.rebuild(decided_window(10)) == 3
    assert cache.get(9) is not None
    assert cache.get(0) is None
    assert (cache.hits, cache.misses) == (1, 1)
