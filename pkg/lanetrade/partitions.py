import dataclasses
import logging
from typing import Iterable, Iterator, List, Tuple

from lanetrade.utils.helpers import cached

logger = logging.getLogger(__name__)

"""

    Coalitions and set partitions of an ordered agent set.

    Agents are 0-based integers internally and 1-based whenever they are
    written out. A coalition is a bitmask over at most MAX_AGENTS agents, so
    (coalition, partition) pairs hash cheaply when used as keys of a
    partition function.

    Partitions are enumerated as restricted growth strings: agent i gets the
    index of its block, a[0] = 0 and a[i] <= max(a[:i]) + 1. Blocks are then
    naturally listed by their smallest member, and the lexicographic order of
    the strings is the canonical order of the partitions.

"""

MAX_AGENTS = 10


class BoundsError(ValueError):
    pass


def _check_bounds(n):
    if not isinstance(n, int) or not 1 <= n <= MAX_AGENTS:
        raise BoundsError(f"agent count must be within 1..{MAX_AGENTS}, got {n!r}")


@dataclasses.dataclass(frozen=True, order=True)
class Coalition:
    mask: int

    def __post_init__(self):
        assert self.mask > 0, "coalitions are non-empty"

    @classmethod
    def of(cls, members: Iterable[int]) -> "Coalition":
        mask = 0
        for i in members:
            assert 0 <= i < MAX_AGENTS, i
            mask |= 1 << i
        return cls(mask)

    @property
    def members(self) -> Tuple[int, ...]:
        return tuple(i for i in range(self.mask.bit_length()) if self.mask >> i & 1)

    @property
    def first(self) -> int:
        return (self.mask & -self.mask).bit_length() - 1

    def __len__(self):
        return bin(self.mask).count("1")

    def __iter__(self) -> Iterator[int]:
        return iter(self.members)

    def __contains__(self, i):
        return bool(self.mask >> i & 1)

    def __or__(self, other: "Coalition") -> "Coalition":
        return Coalition(self.mask | other.mask)

    def isdisjoint(self, other: "Coalition") -> bool:
        return self.mask & other.mask == 0

    def to_json(self) -> List[int]:
        return [i + 1 for i in self.members]

    def __str__(self):
        return "{" + ",".join(str(i + 1) for i in self.members) + "}"

    __repr__ = __str__


@dataclasses.dataclass(frozen=True)
class Partition:
    """A disjoint cover of range(n), stored as its restricted growth string."""

    rgs: Tuple[int, ...]

    def __post_init__(self):
        assert len(self.rgs) > 0 and self.rgs[0] == 0, self.rgs
        top = 0
        for b in self.rgs[1:]:
            assert 0 <= b <= top + 1, f"not a restricted growth string: {self.rgs}"
            top = max(top, b)

    @classmethod
    def from_blocks(cls, n: int, blocks: Iterable[Iterable[int]]) -> "Partition":
        coalitions = [b if isinstance(b, Coalition) else Coalition.of(b) for b in blocks]
        covered = 0
        for c in coalitions:
            if covered & c.mask:
                raise ValueError(f"blocks overlap: {coalitions}")
            covered |= c.mask
        if covered != (1 << n) - 1:
            raise ValueError(f"blocks do not cover {n} agents: {coalitions}")

        coalitions.sort(key=lambda c: c.first)
        rgs = [0] * n
        for idx, c in enumerate(coalitions):
            for i in c:
                rgs[i] = idx
        return cls(tuple(rgs))

    @property
    def n(self) -> int:
        return len(self.rgs)

    @property
    def blocks(self) -> Tuple[Coalition, ...]:
        return _blocks(self.rgs)

    def block_of(self, i: int) -> Coalition:
        return self.blocks[self.rgs[i]]

    def non_singleton_blocks(self) -> Tuple[Coalition, ...]:
        return tuple(b for b in self.blocks if len(b) > 1)

    def is_singletons(self) -> bool:
        return len(set(self.rgs)) == len(self.rgs)

    def is_grand(self) -> bool:
        return max(self.rgs) == 0

    def __len__(self):
        return max(self.rgs) + 1

    def __iter__(self):
        return iter(self.blocks)

    def __contains__(self, coalition):
        return coalition in self.blocks

    def to_json(self) -> List[List[int]]:
        return [b.to_json() for b in self.blocks]

    @classmethod
    def from_json(cls, n: int, data) -> "Partition":
        return cls.from_blocks(n, [[i - 1 for i in block] for block in data])

    def __str__(self):
        return "{" + ",".join(str(b) for b in self.blocks) + "}"

    __repr__ = __str__


@cached
def _blocks(rgs):
    masks = [0] * (max(rgs) + 1)
    for i, b in enumerate(rgs):
        masks[b] |= 1 << i
    return tuple(Coalition(m) for m in masks)


def _growth_strings(n):
    a = [0] * n

    def rec(i, top):
        if i == n:
            yield tuple(a)
            return
        for b in range(top + 2):
            a[i] = b
            yield from rec(i + 1, max(top, b))

    yield from rec(1, 0)


@cached
def enumerate_partitions(n: int) -> Tuple[Partition, ...]:
    _check_bounds(n)
    res = tuple(Partition(rgs) for rgs in _growth_strings(n))
    logger.debug("%d partitions of %d agents", len(res), n)
    return res


@cached
def enumerate_coalitions(n: int) -> Tuple[Coalition, ...]:
    _check_bounds(n)
    return tuple(Coalition(mask) for mask in range(1, 1 << n))


def enumerate_partitions_of(coalition) -> List[Tuple[Coalition, ...]]:
    """Set partitions of the members of `coalition` (a Coalition or a raw mask),
    in growth-string order. The empty set has exactly one, empty, partition."""
    mask = coalition.mask if isinstance(coalition, Coalition) else coalition
    if mask == 0:
        return [()]

    members = [i for i in range(mask.bit_length()) if mask >> i & 1]
    res = []
    for rgs in _growth_strings(len(members)):
        masks = [0] * (max(rgs) + 1)
        for i, b in zip(members, rgs):
            masks[b] |= 1 << i
        res.append(tuple(Coalition(m) for m in masks))
    return res


def singleton_partition(n: int) -> Partition:
    _check_bounds(n)
    return Partition(tuple(range(n)))


def grand_partition(n: int) -> Partition:
    _check_bounds(n)
    return Partition((0,) * n)


def full_coalition(n: int) -> Coalition:
    _check_bounds(n)
    return Coalition((1 << n) - 1)


assert len(enumerate_partitions(3)) == 5
assert Partition.from_blocks(3, [[2], [0, 1]]).rgs == (0, 0, 1)
