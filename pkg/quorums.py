"""
Quorum cardinalities for the three quorum systems and the resilience
calculator built on them.
"""
from dataclasses import dataclass
from typing import Optional

from models import RoundKind

CLASSIC = 'classic'
FAST_UNIFORM = 'fast-uniform'
FAST_LARGE = 'fast-large'
VARIANTS = (CLASSIC, FAST_UNIFORM, FAST_LARGE)

_MIN_REPLICAS = {CLASSIC: 3, FAST_UNIFORM: 3, FAST_LARGE: 4}


class QuorumError(ValueError):
    """Invalid replica count or variant."""


@dataclass(frozen=True)
class QuorumSpec:
    n: int
    variant: str
    classic_size: int
    fast_size: Optional[int] = None

    @property
    def is_fast(self) -> bool:
        return self.fast_size is not None

    @property
    def progress_size(self) -> int:
        """The largest quorum the variant needs to make progress."""
        return max(self.classic_size, self.fast_size or 0)

    def size_for(self, kind: RoundKind) -> int:
        if kind == RoundKind.FAST:
            if self.fast_size is None:
                raise QuorumError(f"{self.variant} quorums have no fast size")
            return self.fast_size
        return self.classic_size


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def smallest_cluster(variant: str) -> int:
    if variant not in _MIN_REPLICAS:
        raise QuorumError(f"unknown quorum variant: {variant!r}")
    return _MIN_REPLICAS[variant]


def quorum_spec(n: int, variant: str) -> QuorumSpec:
    if variant not in VARIANTS:
        raise QuorumError(f"unknown quorum variant: {variant!r}")
    if n < _MIN_REPLICAS[variant]:
        raise QuorumError(f"{variant} needs at least {_MIN_REPLICAS[variant]} replicas, got {n}")

    if variant == CLASSIC:
        return QuorumSpec(n, variant, n // 2 + 1)
    if variant == FAST_UNIFORM:
        size = (2 * n) // 3 + 1
        return QuorumSpec(n, variant, size, size)
    return QuorumSpec(n, variant, n // 2 + 1, _ceil_div(3 * n, 4))


def min_replicas_for_resilience(f: int, variant: str) -> int:
    """Smallest n whose progress quorum survives f failures."""
    if f < 1:
        raise QuorumError(f"f must be >= 1, got {f}")
    n = max(_MIN_REPLICAS.get(variant, 3), f + 1)
    while n - f < quorum_spec(n, variant).progress_size:
        n += 1
    return n


def pick_threshold(spec: QuorumSpec) -> int:
    """
    Votes for one value, among a classic quorum of Phase 1b replies, that
    force the coordinator to re-propose that value.
    """
    if not spec.is_fast:
        raise QuorumError("pick threshold is only defined for fast quorum systems")
    return spec.classic_size + spec.fast_size - spec.n


def intersection_holds(spec: QuorumSpec) -> bool:
    if 2 * spec.classic_size <= spec.n:
        return False
    if spec.is_fast:
        return 2 * spec.fast_size + spec.classic_size - 2 * spec.n >= 1
    return True
