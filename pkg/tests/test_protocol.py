from itertools import combinations, product

import pytest

from models import Message, MessageKind, NOOP, RoundId, RoundKind, Value
from protocol import (Acceptor, AcceptorState, CoordinatorTally, Learner, PickRuleError, ProtocolViolation,
                      acceptor_on_any_then_propose, acceptor_on_phase1a, acceptor_on_phase2a,
                      coordinator_pick_value, detect_collision, free_choice, learner_on_vote,
                      start_recovery_round)
from quorums import CLASSIC, FAST_LARGE, FAST_UNIFORM, QuorumSpec, quorum_spec
from wire import decode_reports

V = Value.of(b'value-v')
W = Value.of(b'value-w')
U = Value.of(b'value-u')


def classic(counter, owner):
    return RoundId(counter, owner, RoundKind.CLASSIC)


def fast(counter, owner):
    return RoundId(counter, owner, RoundKind.FAST)


def phase1a(rnd, instance=0):
    return Message(MessageKind.PHASE1A, rnd.owner, rnd, instance=instance, limit=instance + 1)


def phase2a(rnd, value, instance=0):
    return Message(MessageKind.PHASE2A, rnd.owner, rnd, instance=instance, digest=value.digest, payload=value.payload)


def propose(sender, rnd, value, instance=0):
    return Message(MessageKind.PROPOSE, sender, rnd, instance=instance, digest=value.digest, payload=value.payload)


def vote(sender, rnd, value, instance=0):
    return Message(MessageKind.PHASE2B, sender, rnd, instance=instance, digest=value.digest)


# --- Rounds ---
def test_round_order_uses_counter_then_owner():
    assert classic(5, 1) < classic(5, 2) < classic(6, 0)
    assert classic(4, 1) == fast(4, 1)
    assert start_recovery_round(fast(4, 2), 1) == classic(5, 1)
    assert start_recovery_round(fast(4, 2), 1).kind == RoundKind.CLASSIC
    assert start_recovery_round(classic(4, 1), 1) == classic(5, 1)
    assert start_recovery_round(classic(4, 0), 1) != start_recovery_round(classic(4, 0), 2)


# --- Acceptor rules ---
def test_fresh_acceptor_promises():
    state, reply = acceptor_on_phase1a(AcceptorState(), phase1a(classic(5, 1)), me=3)
    assert state.promised == classic(5, 1)
    assert reply.kind == MessageKind.PHASE1B
    assert reply.vote_round is None


def test_lower_round_is_ignored():
    state = AcceptorState(promised=classic(7, 2))
    new_state, reply = acceptor_on_phase1a(state, phase1a(classic(5, 1)))
    assert reply is None
    assert new_state == state


def test_phase1b_reports_last_vote():
    state = AcceptorState(promised=classic(3, 1), last_vote=(classic(3, 1), V))
    new_state, reply = acceptor_on_phase1a(state, phase1a(classic(9, 2)))
    assert new_state.promised == classic(9, 2)
    assert reply.vote_round == classic(3, 1)
    assert reply.digest == V.digest
    assert reply.payload == V.payload


def test_phase2a_votes_once_per_round():
    state = AcceptorState(promised=classic(5, 1))
    state, reply = acceptor_on_phase2a(state, phase2a(classic(5, 1), V))
    assert reply.kind == MessageKind.PHASE2B
    assert reply.digest == V.digest
    assert state.last_vote == (classic(5, 1), V)

    again, second = acceptor_on_phase2a(state, phase2a(classic(5, 1), W))
    assert second is None
    assert again.last_vote[1] == V


def test_phase2a_below_promise_is_ignored():
    state = AcceptorState(promised=classic(8, 2))
    assert acceptor_on_phase2a(state, phase2a(classic(5, 1), V)) == (state, None)


def test_any_then_first_propose_wins():
    rnd = fast(2, 0)
    state, first = acceptor_on_any_then_propose(AcceptorState(promised=rnd), rnd, propose(1, rnd, V))
    assert first.digest == V.digest
    state, second = acceptor_on_any_then_propose(state, rnd, propose(2, rnd, W))
    assert second is None
    assert state.last_vote[1] == V


def test_any_requires_fast_round():
    with pytest.raises(ValueError):
        acceptor_on_any_then_propose(AcceptorState(), classic(2, 0), propose(1, classic(2, 0), V))


def test_promise_never_decreases():
    state = AcceptorState()
    seen = []
    for counter in (3, 1, 5, 2, 5, 7, 6):
        state, _ = acceptor_on_phase1a(state, phase1a(classic(counter, 0)))
        seen.append(state.promised.counter)
    assert seen == [3, 3, 5, 5, 5, 7, 7]


# --- Multi-instance acceptor ---
def test_propose_before_any_is_held_then_voted():
    acc = Acceptor(me=2, hold_ns=1_000)
    rnd = fast(1, 0)
    range_1a = Message(MessageKind.PHASE1A, 0, rnd, instance=0, limit=None)
    assert acc.on_phase1a(range_1a, watermark=0) is not None

    assert acc.on_propose(propose(1, rnd, V, instance=4), now=0) is None
    votes = acc.on_any(Message(MessageKind.ANY, 0, rnd, instance=0, limit=None), now=10)
    assert [(m.instance, m.digest) for m in votes] == [(4, V.digest)]


def test_held_propose_expires():
    acc = Acceptor(me=2, hold_ns=1_000)
    rnd = fast(1, 0)
    acc.on_propose(propose(1, rnd, V), now=0)
    acc.expire_held(2_000)
    assert acc.on_any(Message(MessageKind.ANY, 0, rnd, instance=0, limit=None), now=2_000) == []


def test_range_phase1b_reports_votes_from_watermark():
    acc = Acceptor(me=1, hold_ns=0)
    acc.on_phase2a(phase2a(classic(1, 0), V, instance=2))
    acc.on_phase2a(phase2a(classic(1, 0), W, instance=5))
    reply = acc.on_phase1a(Message(MessageKind.PHASE1A, 3, classic(2, 3), instance=0, limit=None), watermark=3)
    watermark, votes = decode_reports(reply.payload)
    assert watermark == 3
    assert [(v.instance, v.value.digest) for v in votes] == [(5, W.digest)]
    # the range promise now covers later instances
    assert acc.promise_for(100) == classic(2, 3)
    assert acc.on_phase2a(phase2a(classic(1, 0), U, instance=100)) is None


def test_acceptor_queues_ledger_records():
    acc = Acceptor(me=1, hold_ns=0)
    acc.on_phase1a(phase1a(classic(1, 0), instance=7), watermark=0)
    acc.on_phase2a(phase2a(classic(1, 0), V, instance=7))
    tags = [r.tag.name for r in acc.drain_records()]
    assert tags == ['PROMISE', 'VOTE']
    assert acc.drain_records() == []


# --- Coordinator rule ---
def tally_of(replies):
    t = CoordinatorTally()
    for sender, reported in replies.items():
        t.add_reply(sender, reported)
    return t


def test_pick_free_when_nothing_reported():
    q = quorum_spec(5, CLASSIC)
    assert coordinator_pick_value(tally_of({0: None, 1: None, 2: None}), q) is None
    assert free_choice(tally_of({0: None, 1: None, 2: None})) is None


def test_pick_unique_highest_classic_vote():
    q = quorum_spec(5, CLASSIC)
    t = tally_of({1: None, 2: (classic(3, 1), V), 3: None})
    assert coordinator_pick_value(t, q) == V


def test_pick_fast_threshold():
    q = quorum_spec(8, FAST_LARGE)
    k = fast(4, 0)
    t = tally_of({0: (k, V), 1: (k, V), 2: (k, V), 3: (k, W), 4: None})
    assert coordinator_pick_value(t, q) == V


def test_pick_needs_a_classic_quorum():
    with pytest.raises(ValueError):
        coordinator_pick_value(tally_of({0: None}), quorum_spec(5, CLASSIC))


def test_free_choice_prefers_most_votes_then_smallest_digest():
    k = fast(2, 0)
    t = tally_of({0: (k, V), 1: (k, W), 2: (k, W)})
    assert free_choice(t) == W
    tie = tally_of({0: (k, V), 1: (k, W)})
    assert free_choice(tie).digest == min(V.digest, W.digest)


@pytest.mark.parametrize('variant,n', [(FAST_UNIFORM, 4), (FAST_UNIFORM, 5), (FAST_UNIFORM, 6),
                                       (FAST_LARGE, 4), (FAST_LARGE, 5), (FAST_LARGE, 6), (FAST_LARGE, 7)])
def test_pick_rule_recovers_every_chosen_value(variant, n):
    """Exhaustive over fast-round vote patterns and every classic quorum of replies."""
    q = quorum_spec(n, variant)
    k = fast(1, 0)
    for pattern in product((V, W, None), repeat=n):
        chosen = [x for x in (V, W) if sum(1 for p in pattern if p == x) >= q.fast_size]
        for quorum in combinations(range(n), q.classic_size):
            t = tally_of({a: (k, pattern[a]) if pattern[a] is not None else None for a in quorum})
            picked = coordinator_pick_value(t, q)
            if chosen:
                assert picked == chosen[0]


# --- Learner ---
def test_classic_quorum_decides():
    q = quorum_spec(4, CLASSIC)
    t = CoordinatorTally()
    rnd = classic(2, 1)
    assert learner_on_vote(t, vote(1, rnd, V), q) is None
    assert learner_on_vote(t, vote(2, rnd, V), q) is None
    assert learner_on_vote(t, vote(2, rnd, V), q) is None
    assert learner_on_vote(t, vote(3, rnd, V), q) == V


def test_split_fast_round_does_not_decide():
    q = quorum_spec(4, FAST_UNIFORM)
    t = CoordinatorTally()
    rnd = fast(1, 0)
    results = [learner_on_vote(t, vote(a, rnd, x), q) for a, x in ((1, V), (2, V), (3, W), (4, W))]
    assert results == [None] * 4


def test_conflicting_duplicate_vote():
    rnd = classic(2, 1)
    strict = CoordinatorTally(strict=True)
    strict.add_vote(1, (rnd, V))
    with pytest.raises(ProtocolViolation):
        strict.add_vote(1, (rnd, W))
    lenient = CoordinatorTally()
    lenient.add_vote(1, (rnd, V))
    assert lenient.add_vote(1, (rnd, W)) is False
    assert lenient.count(rnd, V.digest) == 1


def test_learner_announces_each_decision_once():
    learner = Learner(quorum_spec(3, CLASSIC))
    rnd = classic(1, 0)
    assert learner.on_vote(vote(0, rnd, V, instance=4)) is None
    assert learner.on_vote(vote(1, rnd, V, instance=4)) == V.digest
    assert learner.on_vote(vote(2, rnd, V, instance=4)) is None
    assert learner.on_decided(4, V) is None
    assert learner.highest_seen == 4


def test_partial_conflict_is_counted():
    learner = Learner(quorum_spec(5, FAST_UNIFORM))
    rnd = fast(1, 0)
    learner.on_vote(vote(0, rnd, W))
    for a in (1, 2, 3):
        assert learner.on_vote(vote(a, rnd, V)) is None
    assert learner.on_vote(vote(4, rnd, V)) == V.digest
    assert learner.partial_conflicts == 1


# --- Collision detection ---
def votes_in(rnd, assignment):
    t = CoordinatorTally()
    for a, x in assignment.items():
        t.add_vote(a, (rnd, x))
    return t


def test_collision_examples():
    q4 = quorum_spec(4, FAST_UNIFORM)
    rnd = fast(1, 0)
    assert detect_collision(votes_in(rnd, {0: V, 1: V, 2: W, 3: W}), q4, alive_count=4)
    assert not detect_collision(votes_in(rnd, {0: V, 1: V}), q4, alive_count=4)

    q9 = quorum_spec(9, FAST_UNIFORM)
    split = {a: (V, W, U)[a % 3] for a in range(9)}
    assert detect_collision(votes_in(rnd, split), q9, alive_count=9)


def test_classic_rounds_never_collide():
    q = quorum_spec(4, FAST_UNIFORM)
    assert not detect_collision(votes_in(classic(3, 0), {0: V, 1: W, 2: NOOP}), q, alive_count=4)


def test_two_values_at_threshold_is_an_error():
    # fast quorums this small do not intersect: two values can both reach the threshold
    q = QuorumSpec(4, FAST_UNIFORM, classic_size=2, fast_size=2)
    k = fast(1, 0)
    t = tally_of({0: (k, V), 1: (k, V), 2: (k, W), 3: (k, W)})
    with pytest.raises(PickRuleError):
        coordinator_pick_value(t, q)
