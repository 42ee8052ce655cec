"""
Deterministic binary encodings.

Messages are length-prefixed records: a 4-byte length, then a fixed header
(variant tag, round counter/owner/kind, instance, limit, sender, digest,
flags), an optional vote round and an optional payload. Nothing here depends
on dict ordering, so equal messages always encode to equal bytes.
"""
import struct
from typing import List, Optional, Tuple

from models import (Batch, Command, Message, MessageKind, OPEN_LIMIT, ReportedVote,
                    RoundId, RoundKind, Value)


class DecodeError(ValueError):
    """Malformed bytes; the transport drops the datagram."""


_LENGTH = struct.Struct('!I')
_HEADER = struct.Struct('!BQHBQQH32sB')
_ROUND = struct.Struct('!QHB')

FLAG_VOTE_ROUND = 0x01
FLAG_PAYLOAD = 0x02


def _check_round(counter: int, owner: int, kind: int) -> RoundId:
    try:
        return RoundId(counter, owner, RoundKind(kind))
    except ValueError as e:
        raise DecodeError(f"bad round kind {kind}") from e


# --- Messages ---
def encode_message(m: Message) -> bytes:
    flags = 0
    tail = b''
    if m.vote_round is not None:
        flags |= FLAG_VOTE_ROUND
        tail += _ROUND.pack(m.vote_round.counter, m.vote_round.owner, int(m.vote_round.kind))
    if m.payload is not None:
        flags |= FLAG_PAYLOAD
        tail += m.payload
    limit = OPEN_LIMIT if m.limit is None else m.limit
    body = _HEADER.pack(int(m.kind), m.round.counter, m.round.owner, int(m.round.kind),
                        m.instance, limit, m.sender, m.digest, flags) + tail
    return _LENGTH.pack(len(body)) + body


def decode_message(data: bytes) -> Message:
    if len(data) < _LENGTH.size + _HEADER.size:
        raise DecodeError("short record")
    (length,) = _LENGTH.unpack_from(data, 0)
    if length != len(data) - _LENGTH.size:
        raise DecodeError(f"length mismatch: header says {length}, got {len(data) - _LENGTH.size}")
    (tag, counter, owner, kind, instance, limit, sender, digest, flags) = _HEADER.unpack_from(data, _LENGTH.size)
    try:
        variant = MessageKind(tag)
    except ValueError as e:
        raise DecodeError(f"unknown variant tag {tag}") from e
    offset = _LENGTH.size + _HEADER.size
    vote_round = None
    if flags & FLAG_VOTE_ROUND:
        if len(data) < offset + _ROUND.size:
            raise DecodeError("truncated vote round")
        vote_round = _check_round(*_ROUND.unpack_from(data, offset))
        offset += _ROUND.size
    payload = bytes(data[offset:]) if flags & FLAG_PAYLOAD else None
    if payload is None and offset != len(data):
        raise DecodeError("trailing bytes without payload flag")
    return Message(
        kind=variant,
        sender=sender,
        round=_check_round(counter, owner, kind),
        instance=instance,
        limit=None if limit == OPEN_LIMIT else limit,
        digest=digest,
        payload=payload,
        vote_round=vote_round,
    )


# --- Phase 1b reports ---
_REPORT_HEAD = struct.Struct('!QI')
_REPORT = struct.Struct('!QQHB32sI')


def encode_reports(watermark: int, votes: List[ReportedVote]) -> bytes:
    parts = [_REPORT_HEAD.pack(watermark, len(votes))]
    for v in sorted(votes, key=lambda r: r.instance):
        parts.append(_REPORT.pack(v.instance, v.round.counter, v.round.owner, int(v.round.kind),
                                  v.value.digest, len(v.value.payload)))
        parts.append(v.value.payload)
    return b''.join(parts)


def decode_reports(payload: bytes) -> Tuple[int, List[ReportedVote]]:
    if payload is None or len(payload) < _REPORT_HEAD.size:
        raise DecodeError("missing phase 1b report")
    watermark, count = _REPORT_HEAD.unpack_from(payload, 0)
    offset = _REPORT_HEAD.size
    votes = []
    for _ in range(count):
        if len(payload) < offset + _REPORT.size:
            raise DecodeError("truncated report")
        instance, counter, owner, kind, digest, size = _REPORT.unpack_from(payload, offset)
        offset += _REPORT.size
        body = bytes(payload[offset:offset + size])
        if len(body) != size:
            raise DecodeError("truncated report payload")
        offset += size
        votes.append(ReportedVote(instance, _check_round(counter, owner, kind), Value(digest, body)))
    return watermark, votes


# --- Commands and batches ---
_COMMAND = struct.Struct('!Bq5s')
_BATCH_HEAD = struct.Struct('!QHI')
OP_PUT = 1


def encode_command(c: Command) -> bytes:
    return _COMMAND.pack(OP_PUT, c.key, c.value.encode('ascii'))


def decode_command(data: bytes, offset: int = 0) -> Command:
    op, key, raw = _COMMAND.unpack_from(data, offset)
    if op != OP_PUT:
        raise DecodeError(f"unknown op {op}")
    return Command(key=key, value=raw.decode('ascii'))


def encode_batch(b: Batch) -> bytes:
    return _BATCH_HEAD.pack(b.batch_id, b.proposer, len(b.commands)) + b''.join(encode_command(c) for c in b.commands)


def decode_batch(payload: bytes) -> Batch:
    if len(payload) < _BATCH_HEAD.size:
        raise DecodeError("short batch")
    batch_id, proposer, count = _BATCH_HEAD.unpack_from(payload, 0)
    if len(payload) != _BATCH_HEAD.size + count * _COMMAND.size:
        raise DecodeError("batch size mismatch")
    commands = tuple(decode_command(payload, _BATCH_HEAD.size + i * _COMMAND.size) for i in range(count))
    return Batch(batch_id=batch_id, proposer=proposer, commands=commands)


def batch_value(b: Batch) -> Value:
    return Value.of(encode_batch(b))


def batch_size(count: int) -> int:
    return _BATCH_HEAD.size + count * _COMMAND.size


def peek_batch_id(payload: bytes) -> Optional[int]:
    if len(payload) < _BATCH_HEAD.size:
        return None
    return _BATCH_HEAD.unpack_from(payload, 0)[0]
