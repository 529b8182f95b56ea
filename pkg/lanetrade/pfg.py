import dataclasses
import logging
from math import factorial
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from lanetrade.core.lp import solve_lp
from lanetrade.partitions import (
    Coalition,
    Partition,
    enumerate_coalitions,
    enumerate_partitions,
    enumerate_partitions_of,
    full_coalition,
    grand_partition,
    singleton_partition,
)
from lanetrade.utils.helpers import TOLERANCE, cached, clean_float

logger = logging.getLogger(__name__)

"""

    Partition function games.

    v(S, P) is the worth of coalition S when the agents are organized in the
    partition P. This module holds the game, a few structural diagnostics
    (externalities, superadditivity, balancedness of the externality-free
    characteristic function), the two Shapley generalizations and the
    strong-core membership test.

"""

EFFICIENCY_TOLERANCE = 1e-6

# exhaustive externality scans are O(4^n * Bell(n))
MAX_EXTERNALITY_AGENTS = 6


class MissingEntry(KeyError):
    pass


class OverlapError(ValueError):
    pass


class InefficientImputation(ValueError):
    pass


@dataclasses.dataclass
class Play:
    """Lane per agent and each agent's valuation under one partition's play."""

    assignment: Tuple[int, ...]
    agent_values: Tuple[float, ...]


@dataclasses.dataclass
class PartitionFunctionGame:
    n: int
    values: Dict[Tuple[Coalition, Partition], float] = dataclasses.field(default_factory=dict)
    plays: Dict[Partition, Play] = dataclasses.field(default_factory=dict)
    # states (vertical) or leaf histories (horizontal) visited while building
    explored: int = 0

    def value(self, coalition: Coalition, partition: Partition) -> float:
        try:
            return self.values[(coalition, partition)]
        except KeyError:
            raise MissingEntry(f"no worth for {coalition} in {partition}")

    def value_in(self, coalition: Coalition, blocks: Sequence[Coalition]) -> float:
        return self.value(coalition, Partition.from_blocks(self.n, blocks))

    @property
    def grand_value(self) -> float:
        return self.value(full_coalition(self.n), grand_partition(self.n))

    def singleton_value(self, i: int) -> float:
        return self.value(Coalition.of([i]), singleton_partition(self.n))

    def free_worth(self, coalition: Coalition) -> float:
        """v(S, {S} and singletons of the rest)"""
        rest = [Coalition.of([j]) for j in range(self.n) if j not in coalition]
        return self.value_in(coalition, [coalition] + rest)

    def mcquillin_worth(self, coalition: Coalition) -> float:
        """v(S, {S, N minus S})"""
        rest = full_coalition(self.n).mask & ~coalition.mask
        blocks = [coalition] + ([Coalition(rest)] if rest else [])
        return self.value_in(coalition, blocks)

    def shifted(self, offsets: Sequence[float]) -> "PartitionFunctionGame":
        """v'(S, P) = v(S, P) + sum of offsets[i] over S. Plays are dropped."""
        if len(offsets) != self.n:
            raise ValueError(f"{len(offsets)} offsets for {self.n} agents")
        values = {(S, P): v + sum(offsets[i] for i in S) for (S, P), v in self.values.items()}
        return PartitionFunctionGame(n=self.n, values=values, explored=self.explored)

    def check_complete(self):
        for partition in enumerate_partitions(self.n):
            for block in partition.blocks:
                self.value(block, partition)

    def to_json(self) -> List[dict]:
        res = []
        for partition in enumerate_partitions(self.n):
            for block in partition.blocks:
                res.append(
                    {
                        "partition": partition.to_json(),
                        "coalition": block.to_json(),
                        "value": clean_float(self.value(block, partition)),
                    }
                )
        return res

    @classmethod
    def from_json(cls, n: int, data) -> "PartitionFunctionGame":
        pfg = cls(n=n)
        for row in data:
            partition = Partition.from_json(n, row["partition"])
            coalition = Coalition.of(i - 1 for i in row["coalition"])
            if coalition not in partition:
                raise OverlapError(f"{coalition} is not a block of {partition}")
            pfg.values[(coalition, partition)] = float(row["value"])
        pfg.check_complete()
        return pfg


@dataclasses.dataclass(frozen=True)
class Imputation:
    x: Tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "x", tuple(float(v) for v in self.x))

    def __len__(self):
        return len(self.x)

    def __getitem__(self, i):
        return self.x[i]

    def __iter__(self):
        return iter(self.x)

    def total(self, coalition: Optional[Coalition] = None) -> float:
        if coalition is None:
            return sum(self.x)
        return sum(self.x[i] for i in coalition)

    def to_json(self) -> List[float]:
        return [clean_float(v) for v in self.x]


def assert_efficient(pfg: PartitionFunctionGame, x: Imputation, tol=TOLERANCE):
    grand = pfg.grand_value
    assert abs(x.total() - grand) <= tol * max(1.0, abs(grand)), (x, grand)


#
#  Structure of the game
#


@dataclasses.dataclass
class ExternalityWitness:
    C: Coalition
    S: Coalition
    T: Coalition
    rho: Tuple[Coalition, ...]
    delta: float


def classify_externality(pfg: PartitionFunctionGame, C: Coalition, S: Coalition, T: Coalition, rho=()) -> float:
    """v(C; {S+T, C} + rho) - v(C; {S, T, C} + rho)"""
    rho = tuple(rho)
    used = 0
    for c in (C, S, T) + rho:
        if used & c.mask:
            raise OverlapError(f"coalitions overlap: C={C} S={S} T={T} rho={rho}")
        used |= c.mask
    if used != full_coalition(pfg.n).mask:
        raise OverlapError(f"C={C} S={S} T={T} rho={rho} do not cover the {pfg.n} agents")

    merged = pfg.value_in(C, [S | T, C, *rho])
    apart = pfg.value_in(C, [S, T, C, *rho])
    return merged - apart


@dataclasses.dataclass
class ExternalityReport:
    positive: int = 0
    negative: int = 0
    zero: int = 0
    witnesses: Dict[str, List[ExternalityWitness]] = dataclasses.field(
        default_factory=lambda: {"positive": [], "negative": []}
    )

    def sign(self) -> str:
        if self.positive and self.negative:
            return "mixed"
        if self.positive:
            return "positive"
        if self.negative:
            return "negative"
        return "none"


def externality_report(pfg: PartitionFunctionGame, max_witnesses=5) -> ExternalityReport:
    if pfg.n > MAX_EXTERNALITY_AGENTS:
        raise ValueError(f"exhaustive externality scan is limited to {MAX_EXTERNALITY_AGENTS} agents")

    full = full_coalition(pfg.n).mask
    report = ExternalityReport()

    for C in enumerate_coalitions(pfg.n):
        others = full & ~C.mask
        for S in _sub_coalitions(others):
            for T in _sub_coalitions(others & ~S.mask):
                if T.mask < S.mask:
                    continue
                for rho in enumerate_partitions_of(others & ~S.mask & ~T.mask):
                    delta = classify_externality(pfg, C, S, T, rho)
                    if delta > TOLERANCE:
                        kind = "positive"
                        report.positive += 1
                    elif delta < -TOLERANCE:
                        kind = "negative"
                        report.negative += 1
                    else:
                        report.zero += 1
                        continue
                    if len(report.witnesses[kind]) < max_witnesses:
                        report.witnesses[kind].append(ExternalityWitness(C, S, T, rho, delta))

    return report


def _sub_coalitions(mask):
    sub = mask
    res = []
    while sub:
        res.append(Coalition(sub))
        sub = (sub - 1) & mask
    return sorted(res)


@dataclasses.dataclass
class SuperadditivityViolation:
    S: Coalition
    T: Coalition
    rho: Tuple[Coalition, ...]
    merged: float
    separate: float


def check_superadditivity(pfg: PartitionFunctionGame) -> List[SuperadditivityViolation]:
    full = full_coalition(pfg.n).mask
    res = []

    for S in enumerate_coalitions(pfg.n):
        for T in _sub_coalitions(full & ~S.mask):
            if T.mask < S.mask:
                continue
            for rho in enumerate_partitions_of(full & ~S.mask & ~T.mask):
                merged = pfg.value_in(S | T, [S | T, *rho])
                separate = pfg.value_in(S, [S, T, *rho]) + pfg.value_in(T, [S, T, *rho])
                if merged < separate - TOLERANCE:
                    res.append(SuperadditivityViolation(S, T, rho, merged, separate))

    return res


def gamma_game_balanced(pfg: PartitionFunctionGame) -> Tuple[bool, float]:
    """
    Least-core test of w(S) = v(S, {S} and singletons of the rest).
    The characteristic function game is balanced iff min eps <= 0.
    """
    n = pfg.n
    if n == 1:
        return True, 0.0

    coalitions = enumerate_coalitions(n)
    A_ub, b_ub = [], []
    for S in coalitions[:-1]:
        row = [-1.0 if i in S else 0.0 for i in range(n)] + [-1.0]
        A_ub.append(row)
        b_ub.append(-pfg.free_worth(S))

    A_eq = [[1.0] * n + [0.0]]
    b_eq = [pfg.free_worth(coalitions[-1])]
    c = [0.0] * n + [1.0]

    res = solve_lp(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq, bounds=[(None, None)] * (n + 1))
    eps = float(res.x[-1])
    return eps <= TOLERANCE, eps


#
#  Values
#


@cached
def zeta(member: bool, size: int, n: int) -> float:
    if member:
        return factorial(size - 1) * factorial(n - size) / factorial(n)
    return -factorial(size) * factorial(n - size - 1) / factorial(n)


def _shapley_like(pfg: PartitionFunctionGame, worth) -> Imputation:
    n = pfg.n
    coalitions = enumerate_coalitions(n)
    w = np.array([worth(S) for S in coalitions])
    member = np.array([[i in S for S in coalitions] for i in range(n)])
    sizes = np.array([len(S) for S in coalitions])

    phi = []
    for i in range(n):
        coeffs = [zeta(bool(m), int(s), n) for m, s in zip(member[i], sizes)]
        phi.append(float(np.dot(coeffs, w)))

    x = Imputation(phi)
    assert_efficient(pfg, x)
    return x


def externality_free_value(pfg: PartitionFunctionGame) -> Imputation:
    return _shapley_like(pfg, pfg.free_worth)


def mcquillin_value(pfg: PartitionFunctionGame) -> Imputation:
    return _shapley_like(pfg, pfg.mcquillin_worth)


#
#  Strong core
#


class CoreMembership(NamedTuple):
    stable: bool
    blocking: List[Partition]


def is_in_strong_core(pfg: PartitionFunctionGame, x: Imputation) -> CoreMembership:
    n = pfg.n
    grand = pfg.grand_value
    if len(x) != n:
        raise InefficientImputation(f"imputation has {len(x)} entries for {n} agents")
    if abs(x.total() - grand) > EFFICIENCY_TOLERANCE:
        raise InefficientImputation(f"imputation sums to {x.total()}, the grand coalition is worth {grand}")

    blocking = []

    singletons = singleton_partition(n)
    if any(x[i] < pfg.singleton_value(i) - TOLERANCE for i in range(n)):
        blocking.append(singletons)

    for partition in enumerate_partitions(n):
        if partition.is_singletons() or partition.is_grand():
            continue

        if not any(x.total(S) >= pfg.value(S, partition) - TOLERANCE for S in partition.non_singleton_blocks()):
            blocking.append(partition)

    return CoreMembership(stable=not blocking, blocking=blocking)
