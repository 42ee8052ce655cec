import pytest

from models import RoundKind
from quorums import (CLASSIC, FAST_LARGE, FAST_UNIFORM, QuorumError, intersection_holds,
                     min_replicas_for_resilience, pick_threshold, quorum_spec)


@pytest.mark.parametrize('n', range(3, 65))
def test_classic_and_uniform_sizes(n):
    classic = quorum_spec(n, CLASSIC)
    assert classic.classic_size == n // 2 + 1
    assert classic.fast_size is None

    uniform = quorum_spec(n, FAST_UNIFORM)
    assert uniform.classic_size == uniform.fast_size == (2 * n) // 3 + 1

    assert intersection_holds(classic)
    assert intersection_holds(uniform)


@pytest.mark.parametrize('n', range(4, 65))
def test_large_fast_quorums(n):
    spec = quorum_spec(n, FAST_LARGE)
    assert spec.classic_size == n // 2 + 1
    assert spec.fast_size == -(-3 * n // 4)
    assert intersection_holds(spec)
    # any two fast quorums and one classic quorum share an acceptor
    assert 2 * spec.fast_size + spec.classic_size - 2 * n >= 1


def test_examples():
    assert quorum_spec(4, CLASSIC).classic_size == 3
    assert quorum_spec(9, FAST_UNIFORM).fast_size == 7
    spec = quorum_spec(8, FAST_LARGE)
    assert (spec.classic_size, spec.fast_size) == (5, 6)
    assert spec.size_for(RoundKind.FAST) == 6
    assert spec.size_for(RoundKind.CLASSIC) == 5


def test_invalid_arguments():
    with pytest.raises(QuorumError):
        quorum_spec(2, CLASSIC)
    with pytest.raises(QuorumError):
        quorum_spec(3, FAST_LARGE)
    with pytest.raises(QuorumError):
        quorum_spec(5, 'quadratic')
    with pytest.raises(QuorumError):
        quorum_spec(5, CLASSIC).size_for(RoundKind.FAST)
    with pytest.raises(QuorumError):
        pick_threshold(quorum_spec(5, CLASSIC))


def test_resilience_figures():
    assert min_replicas_for_resilience(3, CLASSIC) == 7
    assert min_replicas_for_resilience(3, FAST_LARGE) == 12
    assert min_replicas_for_resilience(1, CLASSIC) == 3
    # uniform quorums of floor(2N/3)+1 survive f failures from N = 3f + 1 on
    assert min_replicas_for_resilience(3, FAST_UNIFORM) == 10


def test_pick_threshold():
    assert pick_threshold(quorum_spec(8, FAST_LARGE)) == 3
    assert pick_threshold(quorum_spec(4, FAST_UNIFORM)) == 2
