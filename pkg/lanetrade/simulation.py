import csv
import dataclasses
import enum
import heapq
import json
import logging
import math
from collections import deque
from pathlib import Path
from typing import Deque, Dict, FrozenSet, List, Optional, Tuple

import numpy as np

from lanetrade.core.lp import SolverError
from lanetrade.core.strong_core import solve_dynamic_epoch
from lanetrade.horizontal import (
    DEFAULT_PARTICIPANT_CAP,
    Participant,
    build_epoch_pfg,
    departure_time,
    grand_play,
    predict_delay,
)
from lanetrade.partitions import MAX_AGENTS
from lanetrade.utils.helpers import clean_float, dump_json
from lanetrade.vertical import MAX_LANES, TIE_EPS

logger = logging.getLogger(__name__)

"""

    Dynamic horizontal queue.

    Vehicles enter a link of length `link_length` at free speed and queue at
    a bottleneck discharging one vehicle per headway h = 3600 / q_out per
    lane. Arrivals are Bernoulli trials per lane and time step; between
    them, time only matters at events:

        arrival         a vehicle enters the link
        imminent_join   a vehicle is within one time step of the back of
                        the queue of its target lane

    Every event is an epoch: the approaching vehicles nearest to the queue
    back play the epoch game, the epsilon strong-core program prices their
    lane assignment, and the imminent ones commit to their lane. Queued
    vehicles never take part again.

"""

STABLE_EPSILON = 1e-9
BUDGET_TOLERANCE = 1e-9
IR_TOLERANCE = 1e-9

ARRIVAL = "arrival"
IMMINENT_JOIN = "imminent_join"
_EVENT_RANK = {ARRIVAL: 0, IMMINENT_JOIN: 1}


class InvalidConfig(ValueError):
    pass


class EpochFailure(RuntimeError):
    def __init__(self, t: float, participants, cause: BaseException):
        self.t = t
        self.participants = tuple(participants)
        self.cause = cause
        super().__init__(f"epoch at t={t:.1f}s with vehicles {list(self.participants)}: {cause!r}")


@dataclasses.dataclass(frozen=True)
class SimConfig:
    link_length: float = 200.0
    lanes: int = 2
    arrival_flow: float = 360.0  # veh/h/lane
    bottleneck_outflow: float = 900.0  # veh/h/lane
    free_speed: float = 25.0
    queue_speed: float = 1.75
    queue_spacing: float = 7.0
    horizon: float = 3600.0
    participant_cap: int = DEFAULT_PARTICIPANT_CAP
    rng_seed: int = 0
    time_step: float = 1.0
    theta_mu: float = 2.16
    theta_sigma: float = 0.7

    def __post_init__(self):
        if not self.link_length > 0:
            raise InvalidConfig(f"link_length must be positive, got {self.link_length}")
        if not 1 <= self.lanes <= MAX_LANES:
            raise InvalidConfig(f"lanes must be in 1..{MAX_LANES}, got {self.lanes}")
        if not 1 <= self.participant_cap <= MAX_AGENTS:
            raise InvalidConfig(f"participant_cap must be in 1..{MAX_AGENTS}, got {self.participant_cap}")
        if not 0 < self.queue_speed < self.free_speed:
            raise InvalidConfig(f"need 0 < queue_speed < free_speed, got {self.queue_speed}, {self.free_speed}")
        if self.bottleneck_outflow <= 0 or self.queue_spacing <= 0:
            raise InvalidConfig("bottleneck_outflow and queue_spacing must be positive")
        if not math.isclose(self.queue_spacing / self.queue_speed, self.headway, rel_tol=1e-9):
            raise InvalidConfig(
                f"queue_spacing / queue_speed = {self.queue_spacing / self.queue_speed}s "
                f"must equal the saturation headway 3600 / bottleneck_outflow = {self.headway}s"
            )
        if self.horizon < 0 or self.time_step <= 0:
            raise InvalidConfig("horizon must be non-negative and time_step positive")
        if not 0 <= self.arrival_probability <= 1:
            raise InvalidConfig(f"arrival probability per step must be in [0, 1], got {self.arrival_probability}")

    @property
    def headway(self) -> float:
        return 3600.0 / self.bottleneck_outflow

    @property
    def arrival_probability(self) -> float:
        return self.arrival_flow * self.time_step / 3600.0

    @property
    def imminence_gap(self) -> float:
        return self.free_speed * self.time_step

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, data) -> "SimConfig":
        if not isinstance(data, dict):
            raise InvalidConfig("config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidConfig(f"unknown config fields: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as e:
            raise InvalidConfig(str(e))


def load_config(path, **overrides) -> SimConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise InvalidConfig(f"{path}: {e.strerror}")
    except json.JSONDecodeError as e:
        raise InvalidConfig(f"{path}:{e.lineno}:{e.colno}: {e.msg}")
    if isinstance(data, dict):
        data = {**data, **overrides}
    return SimConfig.from_json(data)


class Status(enum.Enum):
    APPROACHING = "approaching"
    IMMINENT = "imminent"
    QUEUED = "queued"
    DEPARTED = "departed"


_STATUS_ORDER = list(Status)


@dataclasses.dataclass
class Vehicle:
    vid: int
    theta: float
    arrival: float
    lane: int
    eta: float  # free-flow passage at the bottleneck
    target_lane: int
    position: float = 0.0
    status: Status = Status.APPROACHING
    payment: float = 0.0
    departure: Optional[float] = None
    lane_history: List[int] = dataclasses.field(default_factory=list)
    epochs: int = 0

    def __post_init__(self):
        if not self.lane_history:
            self.lane_history.append(self.lane)

    def move_to(self, status: Status):
        assert _STATUS_ORDER.index(status) > _STATUS_ORDER.index(self.status), (self.vid, self.status, status)
        self.status = status

    @property
    def delay(self) -> Optional[float]:
        if self.departure is None:
            return None
        return self.departure - self.eta

    @property
    def active(self) -> bool:
        return self.status in (Status.APPROACHING, Status.IMMINENT)


@dataclasses.dataclass(frozen=True)
class Event:
    time: float
    kind: str
    vid: int

    def key(self) -> Tuple[float, int, int]:
        return (self.time, _EVENT_RANK[self.kind], self.vid)


@dataclasses.dataclass
class EpochRecord:
    t: float
    kind: str
    participants: Tuple[int, ...]
    epsilon: float
    mean_cost: float
    payments: Tuple[float, ...]
    assignment: Tuple[int, ...]
    nodes: int = 0
    leaves: int = 0
    # sum of the participants' cumulative payments after the epoch
    balance: float = 0.0

    def __post_init__(self):
        assert self.epsilon >= 0, self

    @property
    def optimized(self) -> bool:
        """A lone participant has no coalition to trade with."""
        return len(self.participants) >= 2

    @property
    def stable(self) -> bool:
        return self.epsilon <= STABLE_EPSILON

    @property
    def ratio(self) -> float:
        if self.mean_cost <= 0:
            return 0.0
        return self.epsilon / self.mean_cost


@dataclasses.dataclass
class SimState:
    config: SimConfig
    rng: np.random.Generator
    clock: float = 0.0
    vehicles: Dict[int, Vehicle] = dataclasses.field(default_factory=dict)
    # approaching or imminent, in arrival order
    active: Dict[int, Vehicle] = dataclasses.field(default_factory=dict)
    # committed vehicles not yet past the bottleneck, per lane, in departure order
    lanes: List[Deque[int]] = dataclasses.field(default_factory=list)
    tails: List[Optional[float]] = dataclasses.field(default_factory=list)
    events: List[Tuple[Tuple[float, int, int], Event]] = dataclasses.field(default_factory=list)
    epochs: List[EpochRecord] = dataclasses.field(default_factory=list)
    blocked: FrozenSet[Tuple[int, int]] = frozenset()
    next_vid: int = 0
    ir_checks: int = 0
    max_participants: int = 0

    @classmethod
    def initial(cls, config: SimConfig, blocked=frozenset()) -> "SimState":
        return cls(
            config=config,
            rng=np.random.default_rng(config.rng_seed),
            lanes=[deque() for _ in range(config.lanes)],
            tails=[None] * config.lanes,
            blocked=frozenset(blocked),
        )

    def queue_back(self, lane: int) -> float:
        """Position of the back of the standing queue in `lane`."""
        standing = sum(1 for vid in self.lanes[lane] if self.vehicles[vid].delay > 0)
        return max(0.0, self.config.link_length - self.config.queue_spacing * standing)

    def active_vehicles(self) -> List[Vehicle]:
        return list(self.active.values())

    def push(self, event: Event):
        heapq.heappush(self.events, (event.key(), event))

    def ledger_total(self) -> float:
        return math.fsum(v.payment for v in self.vehicles.values())


def fcfs_lane(state: SimState, eta: float) -> int:
    """Lane with the least predicted delay, lowest lane on ties."""
    h = state.config.headway
    delays = [predict_delay(eta, tail, h) for tail in state.tails]
    best = min(delays)
    return next(lane for lane, d in enumerate(delays) if d <= best + TIE_EPS)


def spawn_vehicle(state: SimState, lane: int, t: float) -> Vehicle:
    config = state.config
    theta = float(state.rng.lognormal(config.theta_mu, config.theta_sigma))
    eta = t + config.link_length / config.free_speed

    vehicle = Vehicle(vid=state.next_vid, theta=theta, arrival=t, lane=lane, eta=eta, target_lane=0)
    vehicle.target_lane = fcfs_lane(state, eta)
    state.vehicles[vehicle.vid] = vehicle
    state.active[vehicle.vid] = vehicle
    state.next_vid += 1

    state.push(Event(t, ARRIVAL, vehicle.vid))
    return vehicle


def advance(state: SimState, t: float):
    """Move the clock to t: departures, positions, new imminent joins."""
    config = state.config
    state.clock = t

    for lane in state.lanes:
        while lane and state.vehicles[lane[0]].departure <= t:
            state.vehicles[lane.popleft()].move_to(Status.DEPARTED)

    for vehicle in state.active_vehicles():
        if vehicle.status is not Status.APPROACHING:
            continue
        back = state.queue_back(vehicle.target_lane)
        vehicle.position = min(config.free_speed * (t - vehicle.arrival), back)
        if back - vehicle.position <= config.imminence_gap + TIE_EPS:
            vehicle.move_to(Status.IMMINENT)
            state.push(Event(t, IMMINENT_JOIN, vehicle.vid))


def select_participants(state: SimState, subject: Optional[int] = None) -> List[Vehicle]:
    """
    Imminent vehicles first, then by distance to the back of their target
    queue, then by id. This is also the Stackelberg order of the epoch game.
    """

    def key(v):
        gap = state.queue_back(v.target_lane) - v.position
        return (0 if v.status is Status.IMMINENT else 1, gap, v.vid)

    candidates = sorted(state.active_vehicles(), key=key)
    chosen = candidates[: state.config.participant_cap]

    if subject is not None and chosen:
        vehicle = state.vehicles[subject]
        if vehicle.active and subject not in {v.vid for v in chosen}:
            chosen = sorted(chosen[:-1] + [vehicle], key=key)

    return chosen


def _run_epoch(state: SimState, event: Event, chosen: List[Vehicle]):
    config = state.config
    vids = [v.vid for v in chosen]
    participants = [Participant(v.vid, v.theta, v.eta) for v in chosen]

    try:
        pfg = build_epoch_pfg(participants, state.tails, config.headway, config.participant_cap, state.blocked)
        play = grand_play(pfg)
        pi_prev = [v.payment for v in chosen]
        payments, solution = solve_dynamic_epoch(pfg, pi_prev, play.agent_values)
    except (SolverError, ValueError, AssertionError) as e:
        raise EpochFailure(event.time, vids, e) from e

    eps = solution.epsilon
    for i in range(pfg.n):
        assert solution.x[i] >= pfg.singleton_value(i) - eps - IR_TOLERANCE, (event.time, vids, i)
    state.ir_checks += pfg.n

    for vehicle, lane, p in zip(chosen, play.assignment, payments):
        vehicle.target_lane = lane
        vehicle.payment += p
        vehicle.epochs += 1

    balance = math.fsum(v.payment for v in chosen)
    scale = max(1.0, math.fsum(abs(v.payment) for v in chosen))
    assert abs(balance) <= BUDGET_TOLERANCE * scale, (event.time, vids, balance)

    record = EpochRecord(
        t=event.time,
        kind=event.kind,
        participants=tuple(vids),
        epsilon=eps,
        mean_cost=float(np.mean([-v for v in play.agent_values])),
        payments=tuple(payments),
        assignment=play.assignment,
        nodes=solution.nodes,
        leaves=pfg.explored,
        balance=balance,
    )
    state.epochs.append(record)
    state.max_participants = max(state.max_participants, pfg.n)

    if not record.stable:
        logger.debug("t=%.0f: %d participants, eps=%.4f", event.time, pfg.n, eps)


def _commit(state: SimState, vehicle: Vehicle):
    """The vehicle changes to its target lane, if needed, and joins its queue."""
    h = state.config.headway
    lane = vehicle.target_lane

    if lane != vehicle.lane:
        vehicle.lane = lane
        vehicle.lane_history.append(lane)

    prev = state.tails[lane]
    vehicle.departure = departure_time(vehicle.eta, prev, h)
    assert prev is None or vehicle.departure >= prev + h - 1e-9, (vehicle, prev)

    state.tails[lane] = vehicle.departure
    state.lanes[lane].append(vehicle.vid)
    vehicle.move_to(Status.QUEUED)
    del state.active[vehicle.vid]


def step_event(state: SimState, event: Event) -> SimState:
    if event.time < state.clock:
        raise ValueError(f"event at {event.time} is earlier than the clock {state.clock}")

    advance(state, event.time)

    subject = state.vehicles[event.vid]
    if event.kind == IMMINENT_JOIN and subject.status is not Status.IMMINENT:
        # committed by an earlier epoch at the same instant
        return state

    chosen = select_participants(state, subject=event.vid)
    if chosen:
        _run_epoch(state, event, chosen)

        # participants are in joining order, the imminent ones lead
        for vehicle in chosen:
            if vehicle.status is Status.IMMINENT:
                _commit(state, vehicle)

    advance(state, event.time)
    return state


@dataclasses.dataclass
class SimulationReport:
    config: SimConfig
    epochs: List[EpochRecord]
    vehicles: List[Vehicle]
    ir_checks: int = 0
    max_participants: int = 0
    ledger_total: float = 0.0

    @property
    def optimizations(self) -> List[EpochRecord]:
        return [e for e in self.epochs if e.optimized]

    @property
    def stable_fraction(self) -> float:
        optimized = self.optimizations
        if not optimized:
            return 1.0
        return sum(1 for e in optimized if e.stable) / len(optimized)

    @property
    def mean_ratio(self) -> float:
        """Headline epsilon / mean cost, averaged over optimizations."""
        optimized = self.optimizations
        if not optimized:
            return 0.0
        return float(np.mean([e.ratio for e in optimized]))

    @property
    def mean_unstable_ratio(self) -> float:
        unstable = [e.ratio for e in self.epochs if not e.stable]
        if not unstable:
            return 0.0
        return float(np.mean(unstable))

    @property
    def max_balance(self) -> float:
        return max((abs(e.balance) for e in self.epochs), default=0.0)

    def summary(self) -> dict:
        return {
            "epochs": len(self.epochs),
            "optimizations": len(self.optimizations),
            "unstable_epochs": sum(1 for e in self.epochs if not e.stable),
            "max_participant_balance": clean_float(self.max_balance),
            "stable_fraction": clean_float(self.stable_fraction),
            "mean_ratio": clean_float(self.mean_ratio),
            "mean_unstable_ratio": clean_float(self.mean_unstable_ratio),
            "vehicles": len(self.vehicles),
            "max_participants": self.max_participants,
            "ir_checks": self.ir_checks,
            "ledger_total": clean_float(self.ledger_total),
            "config": self.config.to_json(),
        }


def run_simulation(config: SimConfig, blocked=frozenset()) -> SimulationReport:
    state = SimState.initial(config, blocked=blocked)
    p = config.arrival_probability
    ticks = int(math.ceil(config.horizon / config.time_step - 1e-9))

    for k in range(ticks):
        t = k * config.time_step
        for lane in range(config.lanes):
            if state.rng.random() < p:
                spawn_vehicle(state, lane, t)
        _drain(state, t)

    # no more arrivals: let everyone on the link join a queue
    k = ticks
    while state.active_vehicles():
        _drain(state, k * config.time_step)
        k += 1

    report = SimulationReport(
        config=config,
        epochs=state.epochs,
        vehicles=sorted(state.vehicles.values(), key=lambda v: v.vid),
        ir_checks=state.ir_checks,
        max_participants=state.max_participants,
        ledger_total=state.ledger_total(),
    )
    logger.info(
        "Simulated %d lanes, q_in=%s, seed %s: %d vehicles, %d epochs, %.1f%% stable",
        config.lanes,
        config.arrival_flow,
        config.rng_seed,
        len(report.vehicles),
        len(report.epochs),
        100 * report.stable_fraction,
    )
    return report


def _drain(state: SimState, t: float):
    advance(state, t)
    while state.events and state.events[0][0][0] <= t:
        _, event = heapq.heappop(state.events)
        step_event(state, event)


def write_artifacts(report: SimulationReport, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    with open(out_dir / "epochs.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["t", "kind", "n_participants", "epsilon", "mean_cost", "ratio", "stable"])
        for e in report.epochs:
            w.writerow(
                [
                    f"{e.t:.3f}",
                    e.kind,
                    len(e.participants),
                    f"{e.epsilon:.9f}",
                    f"{e.mean_cost:.6f}",
                    f"{e.ratio:.6f}",
                    int(e.stable),
                ]
            )

    with open(out_dir / "vehicles.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["id", "theta", "arrival", "lanes", "departure", "delay", "payment", "epochs"])
        for v in report.vehicles:
            w.writerow(
                [
                    v.vid,
                    f"{v.theta:.6f}",
                    f"{v.arrival:.3f}",
                    ">".join(str(lane) for lane in v.lane_history),
                    "" if v.departure is None else f"{v.departure:.3f}",
                    "" if v.delay is None else f"{v.delay:.3f}",
                    f"{v.payment:.6f}",
                    v.epochs,
                ]
            )

    dump_json(report.summary(), out_dir / "summary.json")
