import csv
import dataclasses
import logging
import multiprocessing
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np
import timeout_decorator

from lanetrade.core.strong_core import build_program, program_to_json, solve_exact
from lanetrade.partitions import MAX_AGENTS, enumerate_partitions, grand_partition
from lanetrade.pfg import (
    MAX_EXTERNALITY_AGENTS,
    PartitionFunctionGame,
    check_superadditivity,
    externality_free_value,
    externality_report,
    gamma_game_balanced,
    is_in_strong_core,
    mcquillin_value,
)
from lanetrade.simulation import SimConfig, run_simulation, write_artifacts
from lanetrade.utils.archive import archive_counterexample, fetch_counterexamples, instance_key
from lanetrade.utils.helpers import TOLERANCE, C, clean_float, dump_json, fmt_money
from lanetrade.vertical import (
    MAX_LANES,
    VerticalInstance,
    build_pfg,
    fcfs_baseline,
    load_instance,
    sample_instance,
    savings_pfg,
)

logger = logging.getLogger(__name__)

"""

    Batch studies and single-instance tools.

    Every sampled instance or simulation run gets its own seed derived from
    (master seed, cell, replicate), so cells reproduce in isolation and the
    results do not depend on the order in which workers finish.

"""

MODES = ("vertical_table1", "dynamic_table2", "solve_instance", "analyze_pfg", "conjecture_sweep")

INSTANCE_TIMEOUT = 60 * 3
RUN_TIMEOUT = 60 * 30

TABLE1_AGENTS = (2, 3, 4, 5, 6, 7)
TABLE1_LANES = (2, 3, 4)
TABLE2_FLOWS = (360, 540, 720)
TABLE2_LANES = (2, 3)
TABLE2_RUNS = 6

CONJECTURE_INSTANCES = 1000
CONJECTURE_EPSILON = 1e-7


# Derives from BaseException so it bypasses the "except Exception" handlers
# around single instances.
class TimeoutInterrupt(BaseException):
    """Thrown when an instance or a run exceeds its time budget."""

    def __init__(self, value="Timed Out"):
        self.value = value

    def __str__(self):
        return repr(self.value)


@dataclasses.dataclass
class ExperimentPlan:
    mode: str = "vertical_table1"
    seed: int = 0
    reps: int = 250
    out_dir: Path = Path("lanetrade_out")

    # vertical sampling
    agents: Tuple[int, ...] = TABLE1_AGENTS
    lanes: Tuple[int, ...] = TABLE1_LANES
    mu: float = 2.16
    sigma: float = 0.7
    q_low: int = 1
    q_high: int = 4
    delay_offset: Optional[bool] = None
    instances: int = CONJECTURE_INSTANCES

    # dynamic study
    sim: SimConfig = dataclasses.field(default_factory=SimConfig)
    flows: Tuple[float, ...] = TABLE2_FLOWS
    sim_lanes: Tuple[int, ...] = TABLE2_LANES
    runs: int = TABLE2_RUNS

    instance_path: Optional[Path] = None
    dump_lp: bool = False
    jobs: int = 1
    strict: bool = False

    def __post_init__(self):
        self.out_dir = Path(self.out_dir)
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}, expected one of {', '.join(MODES)}")
        if self.reps < 1 or self.runs < 1 or self.instances < 1:
            raise ValueError("replications, runs and instances must be at least 1")
        if any(not 1 <= n <= MAX_AGENTS for n in self.agents):
            raise ValueError(f"agent counts must be in 1..{MAX_AGENTS}, got {self.agents}")
        if any(not 1 <= m <= MAX_LANES for m in self.lanes + self.sim_lanes):
            raise ValueError(f"lane counts must be in 1..{MAX_LANES}")
        if not 0 <= self.q_low <= self.q_high:
            raise ValueError(f"need 0 <= q_low <= q_high, got {self.q_low}, {self.q_high}")
        if self.mode in ("solve_instance", "analyze_pfg") and self.instance_path is None:
            raise ValueError(f"{self.mode} needs an instance file")

    def sampling(self) -> dict:
        return {
            "mu": self.mu,
            "sigma": self.sigma,
            "q_low": self.q_low,
            "q_high": self.q_high,
            "delay_offset": bool(self.delay_offset),
        }


def _fan_out(func: Callable, tasks: List[tuple], jobs: int) -> Iterable:
    if jobs > 1 and len(tasks) > 1:
        with multiprocessing.get_context("spawn").Pool(processes=jobs) as pool:
            yield from pool.imap_unordered(func, tasks)
    else:
        yield from map(func, tasks)


def _pct(hits: int, total: int) -> str:
    if total == 0:
        return ""
    return f"{100.0 * hits / total:.1f}"


def _write_grid(path: Path, corner: str, rows, cols, cell: Callable[[object, object], str]):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow([corner] + [str(c) for c in cols])
        for r in rows:
            w.writerow([str(r)] + [cell(r, c) for c in cols])


#
#  Static vertical study
#


def evaluate_instance(instance: VerticalInstance) -> Tuple[bool, bool]:
    """Strong-core membership of the externality-free and McQuillin values."""
    pfg = build_pfg(instance)
    free = is_in_strong_core(pfg, externality_free_value(pfg))
    mcq = is_in_strong_core(pfg, mcquillin_value(pfg))
    return free.stable, mcq.stable


def _table1_task(task):
    seed, n_bar, lanes, rep, sampling, strict = task
    rng = np.random.default_rng([seed, n_bar, lanes, rep])
    instance = sample_instance(rng, n_bar, lanes, **sampling)

    try:

        @timeout_decorator.timeout(INSTANCE_TIMEOUT, timeout_exception=TimeoutInterrupt)
        def run():
            return evaluate_instance(instance)

        return (n_bar, lanes, rep), run(), None

    except (Exception, TimeoutInterrupt) as e:
        logger.exception("Problem with instance %s", instance.to_json())
        if strict:
            raise
        return (n_bar, lanes, rep), None, {"instance": instance.to_json(), "error": repr(e)}


@dataclasses.dataclass
class Table1:
    agents: Tuple[int, ...]
    lanes: Tuple[int, ...]
    # (n_bar, lanes) -> [free hits, mcq hits, evaluated]
    counts: Dict[Tuple[int, int], List[int]]
    problems: Dict[str, dict]

    def percent(self, n_bar, lanes, which: int) -> Optional[float]:
        hits = self.counts[(n_bar, lanes)]
        if hits[2] == 0:
            return None
        return 100.0 * hits[which] / hits[2]


def run_table1(plan: ExperimentPlan) -> Table1:
    tasks = [
        (plan.seed, n_bar, lanes, rep, plan.sampling(), plan.strict)
        for n_bar in plan.agents
        for lanes in plan.lanes
        for rep in range(plan.reps)
    ]
    logger.info("Table 1: %d instances in %d cells", len(tasks), len(plan.agents) * len(plan.lanes))

    counts = {(n_bar, lanes): [0, 0, 0] for n_bar in plan.agents for lanes in plan.lanes}
    problems = {}
    for (n_bar, lanes, rep), res, problem in _fan_out(_table1_task, tasks, plan.jobs):
        if res is None:
            problems[f"{n_bar}-{lanes}-{rep}"] = problem
            continue
        cell = counts[(n_bar, lanes)]
        cell[0] += res[0]
        cell[1] += res[1]
        cell[2] += 1

    table = Table1(agents=plan.agents, lanes=plan.lanes, counts=counts, problems=dict(sorted(problems.items())))

    for which, name in ((0, "table1_free.csv"), (1, "table1_mcq.csv")):
        _write_grid(
            plan.out_dir / name,
            "n_bar\\M",
            plan.agents,
            plan.lanes,
            lambda r, c: _pct(counts[(r, c)][which], counts[(r, c)][2]),
        )
    if problems:
        dump_json(table.problems, plan.out_dir / "table1_problems.json")
        logger.warning("%d instances failed, see table1_problems.json", len(problems))

    return table


#
#  Dynamic horizontal study
#


def run_seed(seed: int, *cell) -> int:
    return int(np.random.SeedSequence([seed, *cell]).generate_state(1)[0])


def _table2_task(task):
    config, flow_key, run_idx, run_dir, strict = task

    try:

        @timeout_decorator.timeout(RUN_TIMEOUT, timeout_exception=TimeoutInterrupt)
        def run():
            return run_simulation(config)

        report = run()
        write_artifacts(report, run_dir)
        optimized = report.optimizations
        stats = (
            len(optimized),
            sum(1 for e in optimized if e.stable),
            sum(e.ratio for e in optimized),
            sum(e.ratio for e in optimized if not e.stable),
        )
        return (flow_key, config.lanes, run_idx), stats, None

    except (Exception, TimeoutInterrupt) as e:
        logger.exception("Problem with run %s", run_dir)
        if strict:
            raise
        return (flow_key, config.lanes, run_idx), None, {"config": config.to_json(), "error": repr(e)}


@dataclasses.dataclass
class Table2:
    flows: Tuple[float, ...]
    lanes: Tuple[int, ...]
    # (q_in, lanes) -> [optimizations, stable ones, sum of ratios, sum of unstable ratios]
    # over epochs with at least two participants
    stats: Dict[Tuple[float, int], List[float]]
    problems: Dict[str, dict]

    def stable_percent(self, flow, lanes) -> Optional[float]:
        total, stable, _, _ = self.stats[(flow, lanes)]
        return 100.0 * stable / total if total else None

    def mean_ratio(self, flow, lanes) -> Optional[float]:
        total, _, ratios, _ = self.stats[(flow, lanes)]
        return ratios / total if total else None

    def mean_unstable_ratio(self, flow, lanes) -> Optional[float]:
        total, stable, _, ratios = self.stats[(flow, lanes)]
        return ratios / (total - stable) if total > stable else None


def run_table2(plan: ExperimentPlan) -> Table2:
    tasks = []
    for flow in plan.flows:
        for lanes in plan.sim_lanes:
            for run_idx in range(plan.runs):
                config = dataclasses.replace(
                    plan.sim, arrival_flow=flow, lanes=lanes, rng_seed=run_seed(plan.seed, int(flow), lanes, run_idx)
                )
                run_dir = plan.out_dir / "runs" / f"q{flow:g}_m{lanes}_r{run_idx}"
                tasks.append((config, flow, run_idx, run_dir, plan.strict))
    logger.info("Table 2: %d simulation runs", len(tasks))

    stats = {(flow, lanes): [0, 0, 0.0, 0.0] for flow in plan.flows for lanes in plan.sim_lanes}
    problems = {}
    # sorted so that floating sums do not depend on completion order
    for (flow, lanes, run_idx), res, problem in sorted(
        _fan_out(_table2_task, tasks, plan.jobs), key=lambda item: item[0]
    ):
        if res is None:
            problems[f"{flow:g}-{lanes}-{run_idx}"] = problem
            continue
        cell = stats[(flow, lanes)]
        for k in range(4):
            cell[k] += res[k]

    table = Table2(flows=plan.flows, lanes=plan.sim_lanes, stats=stats, problems=problems)

    def fmt(value, digits):
        return "" if value is None else f"{value:.{digits}f}"

    _write_grid(
        plan.out_dir / "table2_stable.csv",
        "q_in\\M",
        [f"{f:g}" for f in plan.flows],
        plan.sim_lanes,
        lambda r, c: fmt(table.stable_percent(float(r), c), 1),
    )
    _write_grid(
        plan.out_dir / "table2_ratio.csv",
        "q_in\\M",
        [f"{f:g}" for f in plan.flows],
        plan.sim_lanes,
        lambda r, c: fmt(table.mean_ratio(float(r), c), 4),
    )
    _write_grid(
        plan.out_dir / "table2_unstable_ratio.csv",
        "q_in\\M",
        [f"{f:g}" for f in plan.flows],
        plan.sim_lanes,
        lambda r, c: fmt(table.mean_unstable_ratio(float(r), c), 4),
    )
    if problems:
        dump_json(problems, plan.out_dir / "table2_problems.json")
        logger.warning("%d runs failed, see table2_problems.json", len(problems))

    return table


#
#  Single instances
#


def print_pfg(pfg: PartitionFunctionGame):
    for partition in enumerate_partitions(pfg.n):
        worths = "  ".join(f"{block}: {fmt_money(pfg.value(block, partition))}" for block in partition.blocks)
        play = pfg.plays.get(partition)
        lanes = f"  {C.gray}lanes {list(play.assignment)}{C.end}" if play else ""
        print(f"  {C.blue}{partition}{C.end}  {worths}{lanes}")


def solve_instance(plan: ExperimentPlan) -> int:
    """Exit code 0 when the strong-core is non-empty (eps = 0), 2 otherwise."""
    instance = load_instance(plan.instance_path, delay_offset=plan.delay_offset)
    logger.info("Solving %s...", plan.instance_path)

    pfg = build_pfg(instance)
    program = build_program(pfg)
    solution = solve_exact(program)
    grand = pfg.plays[grand_partition(instance.n)]
    fcfs_lanes, fcfs_values = fcfs_baseline(instance)

    print(f"{C.header}thetas{C.end} {list(instance.thetas)}  {C.header}queues{C.end} {list(instance.queues)}")
    print(f"{C.header}cooperative lanes{C.end} {list(grand.assignment)}  total {fmt_money(pfg.grand_value)}")
    print(f"{C.header}fcfs lanes{C.end} {list(fcfs_lanes)}  total {fmt_money(sum(fcfs_values))}")
    print(f"{C.header}partition function{C.end}")
    print_pfg(pfg)
    print(f"{C.header}imputation{C.end} {[fmt_money(v) for v in solution.x]}")
    status = C.okgreen if solution.epsilon <= TOLERANCE else C.fail
    print(f"{C.header}epsilon{C.end} {status}{solution.epsilon:.9f}{C.end}")

    dump_json(
        {
            "instance": instance.to_json(),
            "assignment": list(grand.assignment),
            "fcfs_assignment": list(fcfs_lanes),
            "pfg": pfg.to_json(),
            "solution": solution.to_json(),
        },
        plan.out_dir / "solution.json",
    )
    if plan.dump_lp:
        dump_json(program_to_json(program, solution), plan.out_dir / "program.json")

    return 0 if solution.epsilon <= TOLERANCE else 2


def analyze_pfg(plan: ExperimentPlan) -> int:
    instance = load_instance(plan.instance_path, delay_offset=plan.delay_offset)
    logger.info("Analyzing %s...", plan.instance_path)

    pfg = build_pfg(instance)
    res = {"instance": instance.to_json(), "pfg": pfg.to_json(), "savings": savings_pfg(instance, pfg).to_json()}

    print(f"{C.header}partition function{C.end}")
    print_pfg(pfg)

    if pfg.n <= MAX_EXTERNALITY_AGENTS:
        report = externality_report(pfg)
        print(f"{C.header}externalities{C.end} {report.sign()}: {report.positive} positive, {report.negative} negative")
        witnesses = []
        for kind, items in report.witnesses.items():
            for w in items:
                rho = " ".join(str(c) for c in w.rho)
                print(f"  {kind}: C={w.C} when S={w.S} and T={w.T} merge {rho} delta {fmt_money(w.delta)}")
                witnesses.append(
                    {
                        "kind": kind,
                        "C": w.C.to_json(),
                        "S": w.S.to_json(),
                        "T": w.T.to_json(),
                        "rho": [c.to_json() for c in w.rho],
                        "delta": clean_float(w.delta),
                    }
                )
        res["externalities"] = {
            "sign": report.sign(),
            "positive": report.positive,
            "negative": report.negative,
            "zero": report.zero,
            "witnesses": witnesses,
        }
    else:
        logger.info("Skipping the externality scan above %d agents", MAX_EXTERNALITY_AGENTS)

    violations = check_superadditivity(pfg)
    print(f"{C.header}superadditivity{C.end} {len(violations)} violations")
    for v in violations[:5]:
        print(f"  {v.S} + {v.T}: merged {fmt_money(v.merged)} < separate {fmt_money(v.separate)}")
    res["superadditivity_violations"] = len(violations)

    balanced, least_eps = gamma_game_balanced(pfg)
    print(f"{C.header}gamma game balanced{C.end} {balanced} (least core eps {least_eps:.6f})")
    res["gamma_balanced"] = {"balanced": balanced, "epsilon": clean_float(least_eps)}

    res["values"] = {}
    for name, value in (("free", externality_free_value(pfg)), ("mcquillin", mcquillin_value(pfg))):
        membership = is_in_strong_core(pfg, value)
        mark = f"{C.okgreen}in{C.end}" if membership.stable else f"{C.fail}not in{C.end}"
        print(f"{C.header}{name} value{C.end} {[fmt_money(v) for v in value]} {mark} the strong-core")
        res["values"][name] = {
            "x": value.to_json(),
            "stable": membership.stable,
            "blocking": [p.to_json() for p in membership.blocking],
        }

    solution = solve_exact(build_program(pfg))
    print(f"{C.header}epsilon{C.end} {solution.epsilon:.9f}")
    res["solution"] = solution.to_json()

    dump_json(res, plan.out_dir / "analysis.json")
    return 0


#
#  Non-emptiness sweep
#


def _conjecture_task(task):
    seed, idx, sampling, strict = task
    rng = np.random.default_rng([seed, idx])
    n_bar = int(rng.integers(2, 8))
    lanes = int(rng.integers(1, 5))
    instance = sample_instance(rng, n_bar, lanes, **sampling)

    try:

        @timeout_decorator.timeout(INSTANCE_TIMEOUT, timeout_exception=TimeoutInterrupt)
        def run():
            program = build_program(build_pfg(instance))
            solution = solve_exact(program)
            dump = program_to_json(program, solution) if solution.epsilon > CONJECTURE_EPSILON else None
            return solution.epsilon, solution.nodes, dump

        eps, nodes, dump = run()
        return idx, instance, (eps, nodes, dump), None

    except (Exception, TimeoutInterrupt) as e:
        logger.exception("Problem with instance %s", instance.to_json())
        if strict:
            raise
        return idx, instance, None, repr(e)


def conjecture_sweep(plan: ExperimentPlan, archive_path=None) -> dict:
    tasks = [(plan.seed, idx, plan.sampling(), plan.strict) for idx in range(plan.instances)]
    logger.info("Sweeping %d instances for an empty strong-core...", len(tasks))

    results = sorted(_fan_out(_conjecture_task, tasks, plan.jobs), key=lambda item: item[0])

    solved, max_eps, counterexamples, problems = 0, 0.0, [], {}
    for idx, instance, res, error in results:
        if res is None:
            problems[str(idx)] = {"instance": instance.to_json(), "error": error}
            continue

        eps, _, dump = res
        solved += 1
        max_eps = max(max_eps, eps)
        if eps > CONJECTURE_EPSILON:
            key = instance_key(instance.to_json())
            logger.warning("Counterexample candidate %s: eps=%s", key, eps)
            dump_json(
                {"instance": instance.to_json(), "epsilon": clean_float(eps), "program": dump},
                plan.out_dir / "counterexamples" / f"{key}.json",
            )
            archive_counterexample(instance, eps, dump, path=archive_path)
            counterexamples.append(key)

    summary = {
        "instances": plan.instances,
        "solved": solved,
        "max_epsilon": clean_float(max_eps),
        "counterexamples": counterexamples,
        "problems": problems,
        "seed": plan.seed,
        # everything the archive holds, earlier sweeps included
        "archived": [{"key": row["key"], "epsilon": row["epsilon"]} for row in fetch_counterexamples(archive_path)],
    }
    dump_json(summary, plan.out_dir / "conjecture.json")
    logger.info("Sweep done: %d solved, max eps %s, %d counterexamples", solved, max_eps, len(counterexamples))
    return summary
