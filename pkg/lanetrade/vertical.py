import dataclasses
import json
import logging
import math
from pathlib import Path
from typing import Dict, Optional, Tuple

from lanetrade.partitions import (
    MAX_AGENTS,
    Coalition,
    Partition,
    enumerate_partitions,
    singleton_partition,
)
from lanetrade.pfg import PartitionFunctionGame, Play

logger = logging.getLogger(__name__)

"""

    Static vertical queue.

    Agents approach a bottleneck with `lanes` point queues, in arrival order.
    Agent i joining lane m behind Q_m queued vehicles and j_m predecessors that
    picked m waits Q_m + j_m (or one less with `delay_offset`), at a cost of
    theta_i per unit.

    Given a coalition structure, the agents play an n-level Stackelberg game:
    each one, knowing the lanes picked before it, picks the lane that is best
    for itself plus the members of its coalition that come after it. Since the
    delay only depends on the lane counts, a state is (level, counts) and the
    backward recursion is polynomial in n for a fixed number of lanes.

"""

MAX_LANES = 4

# scores closer than this are a tie, and the lowest lane wins
TIE_EPS = 1e-9


class InvalidInstance(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class VerticalInstance:
    thetas: Tuple[float, ...]
    queues: Tuple[int, ...]
    delay_offset: bool = False

    def __post_init__(self):
        object.__setattr__(self, "thetas", tuple(float(t) for t in self.thetas))
        object.__setattr__(self, "queues", tuple(self.queues))

        if not 1 <= len(self.thetas) <= MAX_AGENTS:
            raise InvalidInstance(f"thetas: need 1..{MAX_AGENTS} agents, got {len(self.thetas)}")
        for t in self.thetas:
            if not math.isfinite(t) or t <= 0:
                raise InvalidInstance(f"thetas: values of time must be positive, got {t}")

        if not 1 <= len(self.queues) <= MAX_LANES:
            raise InvalidInstance(f"queues: need 1..{MAX_LANES} lanes, got {len(self.queues)}")
        for q in self.queues:
            if isinstance(q, bool) or not isinstance(q, int) or q < 0:
                raise InvalidInstance(f"queues: lengths must be non-negative integers, got {q!r}")
        if any(a < b for a, b in zip(self.queues, self.queues[1:])):
            raise InvalidInstance(f"queues: must be non-increasing in lane index, got {list(self.queues)}")

    @property
    def n(self) -> int:
        return len(self.thetas)

    @property
    def lanes(self) -> int:
        return len(self.queues)

    def to_json(self) -> dict:
        res = {"thetas": list(self.thetas), "queues": list(self.queues)}
        if self.delay_offset:
            res["delay_offset"] = True
        return res

    @classmethod
    def from_json(cls, data, delay_offset=None) -> "VerticalInstance":
        if not isinstance(data, dict):
            raise InvalidInstance("instance must be a JSON object")
        unknown = set(data) - {"thetas", "queues", "delay_offset"}
        if unknown:
            raise InvalidInstance(f"unknown fields: {sorted(unknown)}")
        for key in ("thetas", "queues"):
            if not isinstance(data.get(key), list):
                raise InvalidInstance(f"{key}: expected a list")
        if delay_offset is None:
            delay_offset = bool(data.get("delay_offset", False))
        return cls(thetas=data["thetas"], queues=data["queues"], delay_offset=delay_offset)


def load_instance(path, delay_offset=None) -> VerticalInstance:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise InvalidInstance(f"{path}: {e.strerror}")

    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise InvalidInstance(f"{path}:{e.lineno}:{e.colno}: {e.msg}")

    try:
        return VerticalInstance.from_json(data, delay_offset=delay_offset)
    except InvalidInstance as e:
        raise InvalidInstance(f"{path}: {e}")


@dataclasses.dataclass(frozen=True)
class LaneCountState:
    level: int
    counts: Tuple[int, ...]

    def __post_init__(self):
        assert sum(self.counts) == self.level and min(self.counts) >= 0, self

    def advance(self, lane: int) -> "LaneCountState":
        counts = list(self.counts)
        counts[lane] += 1
        return LaneCountState(self.level + 1, tuple(counts))

    @classmethod
    def initial(cls, lanes: int) -> "LaneCountState":
        return cls(0, (0,) * lanes)


def delay(instance: VerticalInstance, state: LaneCountState, lane: int) -> int:
    if not 0 <= lane < instance.lanes:
        raise IndexError(f"lane {lane} out of range for {instance.lanes} lanes")
    return instance.queues[lane] + state.counts[lane] - (1 if instance.delay_offset else 0)


def valuation(instance: VerticalInstance, state: LaneCountState, lane: int) -> float:
    return -instance.thetas[state.level] * delay(instance, state, lane)


@dataclasses.dataclass
class StackelbergSolution:
    partition: Partition
    values: Dict[Coalition, float]
    assignment: Tuple[int, ...]
    agent_values: Tuple[float, ...]
    states: int

    def play(self) -> Play:
        return Play(assignment=self.assignment, agent_values=self.agent_values)


def solve_stackelberg(instance: VerticalInstance, partition: Partition) -> StackelbergSolution:
    """
    Backward recursion over lane-count states.

    memo[state] = (continuation value per block, lane picked at state).
    Terminal states are not stored, so the table size is bounded by
    n * (n + l)^l.
    """
    assert partition.n == instance.n, (partition, instance)

    n, lanes = instance.n, instance.lanes
    rgs = partition.rgs
    zero = (0.0,) * len(partition)
    memo: Dict[LaneCountState, Tuple[Tuple[float, ...], int]] = {}

    def continuation(state):
        if state.level == n:
            return zero

        if state in memo:
            return memo[state][0]

        block = rgs[state.level]
        best = None
        for lane in range(lanes):
            own = valuation(instance, state, lane)
            vec = continuation(state.advance(lane))
            score = own + vec[block]
            if best is None or score > best[0] + TIE_EPS:
                best = (score, lane, own, vec)

        _, lane, own, vec = best
        res = list(vec)
        res[block] += own
        memo[state] = (tuple(res), lane)
        return memo[state][0]

    root = LaneCountState.initial(lanes)
    top = continuation(root)

    assignment = []
    agent_values = []
    state = root
    while state.level < n:
        lane = memo[state][1]
        assignment.append(lane)
        agent_values.append(valuation(instance, state, lane))
        state = state.advance(lane)

    values = {block: top[idx] for idx, block in enumerate(partition.blocks)}
    return StackelbergSolution(
        partition=partition,
        values=values,
        assignment=tuple(assignment),
        agent_values=tuple(agent_values),
        states=len(memo),
    )


def build_pfg(instance: VerticalInstance) -> PartitionFunctionGame:
    pfg = PartitionFunctionGame(n=instance.n)

    for partition in enumerate_partitions(instance.n):
        sol = solve_stackelberg(instance, partition)
        for block, value in sol.values.items():
            pfg.values[(block, partition)] = value
        pfg.plays[partition] = sol.play()
        pfg.explored += sol.states

    logger.debug("built game for %s: %d entries, %d states", instance.thetas, len(pfg.values), pfg.explored)
    return pfg


def fcfs_baseline(instance: VerticalInstance) -> Tuple[Tuple[int, ...], Tuple[float, ...]]:
    sol = solve_stackelberg(instance, singleton_partition(instance.n))
    return sol.assignment, sol.agent_values


def savings_pfg(instance: VerticalInstance, pfg: Optional[PartitionFunctionGame] = None) -> PartitionFunctionGame:
    """
    Worth measured against the all-singletons play: v(S, P) minus what the
    members of S get under FCFS. Strong-core membership is unchanged by the shift.
    """
    if pfg is None:
        pfg = build_pfg(instance)
    _, baseline = fcfs_baseline(instance)
    return pfg.shifted([-v for v in baseline])


def sample_instance(
    rng,
    n_bar: int,
    lanes: int,
    mu: float = 2.16,
    sigma: float = 0.7,
    q_low: int = 1,
    q_high: int = 4,
    delay_offset: bool = False,
    n: Optional[int] = None,
) -> VerticalInstance:
    """
    n ~ Unif{1..n_bar}, theta ~ lognormal(mu, sigma), the last lane's queue
    ~ Unif{q_low..q_high} and every earlier one ~ Unif{q_low..next}.
    That draws non-decreasing queues, so lanes are relabeled longest first.
    """
    if n is None:
        n = int(rng.integers(1, n_bar + 1))
    thetas = [float(t) for t in rng.lognormal(mu, sigma, size=n)]

    queues = [0] * lanes
    queues[-1] = int(rng.integers(q_low, q_high + 1))
    for m in reversed(range(lanes - 1)):
        queues[m] = int(rng.integers(q_low, queues[m + 1] + 1))

    return VerticalInstance(thetas=thetas, queues=sorted(queues, reverse=True), delay_offset=delay_offset)
