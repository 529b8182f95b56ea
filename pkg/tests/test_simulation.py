import json
import math
from collections import defaultdict

import pytest

from lanetrade.simulation import (
    ARRIVAL,
    IMMINENT_JOIN,
    EpochFailure,
    EpochRecord,
    Event,
    InvalidConfig,
    SimConfig,
    SimState,
    SimulationReport,
    Status,
    load_config,
    run_simulation,
    select_participants,
    spawn_vehicle,
    step_event,
    write_artifacts,
)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"lanes": 0},
        {"lanes": 5},
        {"participant_cap": 11},
        {"queue_speed": 30.0, "queue_spacing": 120.0},
        {"queue_spacing": 8.0},
        {"bottleneck_outflow": 1200.0},
        {"arrival_flow": 7200.0},
        {"horizon": -1.0},
        {"link_length": 0.0},
    ],
)
def test_invalid_config(kwargs):
    with pytest.raises(InvalidConfig):
        SimConfig(**kwargs)


def test_config_defaults():
    config = SimConfig()
    assert config.headway == 4.0
    assert config.arrival_probability == pytest.approx(0.1)
    assert config.imminence_gap == 25.0
    assert SimConfig.from_json(config.to_json()) == config


def test_config_from_json(tmp_path):
    with pytest.raises(InvalidConfig, match="speed_limit"):
        SimConfig.from_json({"lanes": 3, "speed_limit": 30})
    with pytest.raises(InvalidConfig):
        SimConfig.from_json([1, 2])

    path = tmp_path / "config.json"
    path.write_text(json.dumps({"lanes": 3, "horizon": 60}))
    config = load_config(path, rng_seed=5)
    assert (config.lanes, config.horizon, config.rng_seed) == (3, 60, 5)

    path.write_text("{lanes: 3}")
    with pytest.raises(InvalidConfig, match="config.json:1:"):
        load_config(path)


def test_vehicles_only_move_forward():
    state = SimState.initial(SimConfig())
    vehicle = spawn_vehicle(state, 0, 0.0)
    vehicle.move_to(Status.IMMINENT)
    with pytest.raises(AssertionError):
        vehicle.move_to(Status.APPROACHING)


def test_zero_horizon():
    report = run_simulation(SimConfig(horizon=0.0))
    assert report.epochs == []
    assert report.vehicles == []
    assert report.stable_fraction == 1.0
    assert report.summary()["epochs"] == 0


def test_single_vehicle_into_empty_lanes():
    state = SimState.initial(SimConfig())
    vehicle = spawn_vehicle(state, 1, 0.0)
    assert vehicle.eta == 8.0
    assert vehicle.target_lane == 0

    step_event(state, Event(0.0, ARRIVAL, vehicle.vid))
    assert len(state.epochs) == 1
    epoch = state.epochs[0]
    assert epoch.epsilon == 0.0
    assert epoch.payments == (0.0,)
    assert epoch.assignment == (0,)
    assert epoch.ratio == 0.0
    assert vehicle.status is Status.APPROACHING

    # 25 m/s over 200 m: one step away from the stop line at t = 7
    step_event(state, Event(7.0, IMMINENT_JOIN, vehicle.vid))
    assert vehicle.status is Status.QUEUED
    assert vehicle.departure == 8.0
    assert vehicle.delay == 0.0
    assert vehicle.lane_history == [1, 0]
    assert state.tails == [8.0, None]
    assert state.active == {}

    with pytest.raises(ValueError):
        step_event(state, Event(5.0, ARRIVAL, vehicle.vid))


def test_participants_are_capped_and_ordered():
    state = SimState.initial(SimConfig(lanes=3, participant_cap=3))
    for lane in range(3):
        spawn_vehicle(state, lane, 0.0)
    for lane in range(2):
        spawn_vehicle(state, lane, 1.0)

    chosen = select_participants(state)
    assert [v.vid for v in chosen] == [0, 1, 2]

    # the event's vehicle always plays
    chosen = select_participants(state, subject=4)
    assert [v.vid for v in chosen] == [0, 1, 4]


def check_report(report, config):
    h = config.headway
    assert report.ir_checks == sum(len(e.participants) for e in report.epochs)
    assert 0 < report.max_participants <= config.participant_cap
    assert 0.0 <= report.stable_fraction <= 1.0

    departures = defaultdict(list)
    for v in report.vehicles:
        assert v.status in (Status.QUEUED, Status.DEPARTED)
        assert v.delay >= -1e-9
        departures[v.lane].append(v.departure)
    for times in departures.values():
        times.sort()
        assert all(b - a >= h - 1e-9 for a, b in zip(times, times[1:]))

    for e in report.epochs:
        assert len(e.participants) <= config.participant_cap
        assert e.epsilon >= 0
        assert e.leaves == config.lanes ** len(e.participants)
        assert abs(e.balance) <= 1e-6


def test_short_run():
    config = SimConfig(horizon=180.0, rng_seed=1)
    report = run_simulation(config)
    assert report.vehicles
    check_report(report, config)


def test_short_run_with_small_cap():
    config = SimConfig(horizon=120.0, rng_seed=2, lanes=3, arrival_flow=540.0, participant_cap=2)
    check_report(run_simulation(config), config)


def test_runs_are_reproducible(tmp_path):
    config = SimConfig(horizon=120.0, rng_seed=7)
    for name in ("a", "b"):
        write_artifacts(run_simulation(config), tmp_path / name)
    for name in ("epochs.csv", "vehicles.csv", "summary.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert summary["config"]["rng_seed"] == 7
    header = (tmp_path / "a" / "epochs.csv").read_text().splitlines()[0]
    assert header == "t,kind,n_participants,epsilon,mean_cost,ratio,stable"


def test_blocked_branches_are_never_played():
    config = SimConfig(horizon=60.0, rng_seed=3)
    report = run_simulation(config, blocked={(0, 0)})
    assert all(e.assignment[0] == 1 for e in report.epochs)


def test_epoch_failure_names_the_participants():
    config = SimConfig(horizon=10.0, arrival_flow=3600.0)
    with pytest.raises(EpochFailure) as info:
        run_simulation(config, blocked={(0, 0), (0, 1)})
    assert info.value.t == 0.0
    assert info.value.participants
    assert isinstance(info.value.cause, ValueError)


def test_report_statistics():
    def record(eps, cost, participants=(0, 1), balance=0.0):
        return EpochRecord(
            t=0.0,
            kind=ARRIVAL,
            participants=participants,
            epsilon=eps,
            mean_cost=cost,
            payments=(0.0,) * len(participants),
            assignment=(0,) * len(participants),
            balance=balance,
        )

    epochs = [record(0.0, 10.0), record(2.0, 10.0), record(1.0, 4.0, balance=-2.5e-10), record(0.0, 3.0, (4,))]
    report = SimulationReport(config=SimConfig(), epochs=epochs, vehicles=[])
    assert not epochs[-1].optimized
    assert report.stable_fraction == pytest.approx(1 / 3)
    assert report.mean_ratio == pytest.approx((0.0 + 0.2 + 0.25) / 3)
    assert report.mean_unstable_ratio == pytest.approx(0.225)
    summary = report.summary()
    assert (summary["epochs"], summary["optimizations"], summary["unstable_epochs"]) == (4, 3, 2)
    assert summary["max_participant_balance"] == pytest.approx(2.5e-10)

    with pytest.raises(AssertionError):
        record(-1.0, 1.0)


def test_lone_participants_do_not_count_as_optimizations():
    config = SimConfig()
    state = SimState.initial(config)
    vehicle = spawn_vehicle(state, 0, 0.0)
    step_event(state, Event(0.0, ARRIVAL, vehicle.vid))

    report = SimulationReport(config=config, epochs=state.epochs, vehicles=[vehicle])
    assert len(report.epochs) == 1
    assert report.optimizations == []
    assert report.stable_fraction == 1.0
    assert report.summary()["optimizations"] == 0


@pytest.mark.slow
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_participant_ledgers_net_to_zero(seed):
    # departed vehicles keep their payments: each epoch's participants are
    # balanced, the global ledger is only reported
    report = run_simulation(SimConfig(horizon=600.0, arrival_flow=720.0, rng_seed=seed))
    assert report.optimizations
    assert all(abs(e.balance) <= 1e-6 for e in report.epochs)
    assert report.ledger_total == pytest.approx(math.fsum(v.payment for v in report.vehicles), abs=1e-9)
    assert report.summary()["ledger_total"] == pytest.approx(report.ledger_total, abs=1e-6)
