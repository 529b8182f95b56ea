import argparse
import cProfile
import logging
import sys
from pathlib import Path

import coloredlogs

from lanetrade.experiments import (
    MODES,
    ExperimentPlan,
    analyze_pfg,
    conjecture_sweep,
    run_table1,
    run_table2,
    solve_instance,
)
from lanetrade.simulation import InvalidConfig, load_config
from lanetrade.utils.helpers import C
from lanetrade.vertical import InvalidInstance

logger = logging.getLogger(__name__)


def setup_logging(argv):
    if "--verbose" in argv:
        log_level = logging.DEBUG
    elif "--silent" in argv:
        log_level = logging.CRITICAL
    elif "--errors" in argv:
        log_level = logging.ERROR
    else:
        log_level = logging.INFO

    logging.getLogger("lanetrade.core.lp").setLevel(logging.INFO)

    coloredlogs.install(
        level=log_level,
        fmt="%(asctime)s %(name)s %(message)s",
        datefmt="%H:%M:%S",
        field_styles={"asctime": {"color": "white", "faint": True}},
    )


def _ints(text):
    return tuple(int(v) for v in text.split(","))


def _floats(text):
    return tuple(float(v) for v in text.split(","))


def parse_args(argv):
    p = argparse.ArgumentParser(
        prog="lanetrade",
        description="Coalitionally stable lane assignments with side payments.",
    )
    p.add_argument("instance", nargs="?", type=Path, help="instance json for solve_instance / analyze_pfg")
    p.add_argument("--mode", choices=MODES, default="vertical_table1")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--reps", type=int, default=None, help="replications per cell (runs per cell for table 2)")
    p.add_argument("--instances", type=int, default=None, help="instances in the non-emptiness sweep")
    p.add_argument("--out-dir", type=Path, default=Path("lanetrade_out"))
    p.add_argument("--config", type=Path, default=None, help="simulation config json")
    p.add_argument("--agents", type=_ints, default=None, help="n_bar rows for table 1, e.g. 2,3,4")
    p.add_argument("--lanes", type=_ints, default=None, help="lane columns, e.g. 2,3")
    p.add_argument("--flows", type=_floats, default=None, help="q_in rows for table 2, e.g. 360,720")
    p.add_argument("--dump-lp", action="store_true", help="write the epsilon program next to the solution")
    p.add_argument("--delay-offset", action="store_true", default=None, help="delay Q_m + j_m - 1")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--strict", action="store_true", help="stop at the first failing instance")
    p.add_argument("--profile", action="store_true", help="dump cProfile stats to lanetrade.prof")
    p.add_argument("--verbose", action="store_true")
    p.add_argument("--silent", action="store_true")
    p.add_argument("--errors", action="store_true")
    return p.parse_args(argv)


def build_plan(args) -> ExperimentPlan:
    kwargs = dict(
        mode=args.mode,
        seed=args.seed,
        out_dir=args.out_dir,
        instance_path=args.instance,
        dump_lp=args.dump_lp,
        delay_offset=args.delay_offset,
        jobs=args.jobs,
        strict=args.strict,
    )
    if args.config is not None:
        kwargs["sim"] = load_config(args.config)
    if args.instances is not None:
        kwargs["instances"] = args.instances
    if args.reps is not None:
        kwargs["runs" if args.mode == "dynamic_table2" else "reps"] = args.reps
    if args.agents is not None:
        kwargs["agents"] = args.agents
    if args.lanes is not None:
        kwargs["sim_lanes" if args.mode == "dynamic_table2" else "lanes"] = args.lanes
    if args.flows is not None:
        kwargs["flows"] = args.flows
    return ExperimentPlan(**kwargs)


def run(plan: ExperimentPlan) -> int:
    if plan.mode == "vertical_table1":
        run_table1(plan)
    elif plan.mode == "dynamic_table2":
        run_table2(plan)
    elif plan.mode == "solve_instance":
        return solve_instance(plan)
    elif plan.mode == "analyze_pfg":
        return analyze_pfg(plan)
    elif plan.mode == "conjecture_sweep":
        conjecture_sweep(plan)
    return 0


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    setup_logging(argv)
    args = parse_args(argv)

    try:
        plan = build_plan(args)
        if args.profile:
            with cProfile.Profile() as profile:
                code = run(plan)
            profile.dump_stats("lanetrade.prof")
        else:
            code = run(plan)

    except (InvalidInstance, InvalidConfig, ValueError) as e:
        logger.error("%s%s%s", C.fail, e, C.end)
        if args.strict:
            raise
        return 1

    logger.info("Results in %s", plan.out_dir)
    return code


if __name__ == "__main__":
    sys.exit(main())
