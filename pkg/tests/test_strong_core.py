import math

import numpy as np
import pytest
from oracles import enumerate_epsilon, milp_epsilon, random_game, tabulated_game

from lanetrade.core.strong_core import (
    build_program,
    minimal_epsilon,
    program_to_json,
    solve_dynamic_epoch,
    solve_exact,
)
from lanetrade.partitions import enumerate_partitions, grand_partition
from lanetrade.pfg import externality_free_value, is_in_strong_core
from lanetrade.vertical import VerticalInstance, build_pfg, sample_instance


def solve(pfg):
    return solve_exact(build_program(pfg))


def check_feasible(pfg, sol):
    assert sol.epsilon >= 0
    assert sol.x.total() == pytest.approx(pfg.grand_value, abs=1e-7)
    for i in range(pfg.n):
        assert sol.x[i] >= pfg.singleton_value(i) - sol.epsilon - 1e-7
    for partition in enumerate_partitions(pfg.n):
        if partition.is_singletons() or partition.is_grand():
            continue
        assert any(
            sol.x.total(S) >= pfg.value(S, partition) - sol.epsilon - 1e-7 for S in partition.non_singleton_blocks()
        )


def test_single_agent():
    pfg = tabulated_game(1, lambda S, P: -4.0)
    sol = solve(pfg)
    assert sol.epsilon == 0.0
    assert sol.x.x == pytest.approx((-4.0,))


def test_two_agents_only_need_individual_rationality():
    pfg = tabulated_game(2, lambda S, P: -1.0 if len(S) == 2 else 0.0)
    program = build_program(pfg)
    assert program.disjunctions == []
    assert program.big_m == 2.0

    sol = solve_exact(program)
    assert sol.epsilon == pytest.approx(0.5, abs=1e-9)
    assert sol.x.x == pytest.approx((-0.5, -0.5), abs=1e-9)


def test_program_shape():
    pfg = build_pfg(VerticalInstance(thetas=[3.0, 1.0, 2.0], queues=[2, 1]))
    program = build_program(pfg)
    assert len(program.disjunctions) == 3
    assert all(len(d.rows) == 1 for d in program.disjunctions)

    rng = np.random.default_rng(4)
    pfg = build_pfg(sample_instance(rng, n_bar=5, lanes=2, n=5))
    program = build_program(pfg)
    expected = sum(
        len(p.non_singleton_blocks()) for p in enumerate_partitions(5) if not (p.is_singletons() or p.is_grand())
    )
    assert program.shape() == {
        "group_rows": expected,
        "individual_rows": 5,
        "cardinality_rows": 50,
        "equality_rows": 1,
    }
    worths = list(pfg.values.values())
    assert program.big_m == pytest.approx(max(worths) - min(worths) + 1.0)


def test_matches_enumeration_on_synthetic_games():
    rng = np.random.default_rng(31)
    for n in (2, 3, 4):
        for _ in range(40):
            pfg = random_game(rng, n)
            sol = solve(pfg)
            assert sol.epsilon == pytest.approx(enumerate_epsilon(pfg), abs=1e-7)
            check_feasible(pfg, sol)


def test_matches_enumeration_on_vertical_games():
    rng = np.random.default_rng(8)
    for _ in range(100):
        inst = sample_instance(rng, n_bar=4, lanes=int(rng.integers(1, 5)))
        pfg = build_pfg(inst)
        sol = solve(pfg)
        assert sol.epsilon == pytest.approx(enumerate_epsilon(pfg), abs=1e-7)
        check_feasible(pfg, sol)


def test_matches_milp_with_five_agents():
    rng = np.random.default_rng(12)
    for _ in range(10):
        pfg = build_pfg(sample_instance(rng, n_bar=5, lanes=int(rng.integers(2, 4)), n=5))
        sol = solve(pfg)
        assert sol.epsilon == pytest.approx(milp_epsilon(pfg), abs=1e-6)
        check_feasible(pfg, sol)


@pytest.mark.slow
def test_matches_milp_on_a_hundred_five_agent_games():
    rng = np.random.default_rng(14)
    for _ in range(100):
        pfg = build_pfg(sample_instance(rng, n_bar=5, lanes=int(rng.integers(1, 5)), n=5))
        sol = solve(pfg)
        assert sol.epsilon == pytest.approx(milp_epsilon(pfg), abs=1e-6)
        check_feasible(pfg, sol)


@pytest.mark.slow
def test_matches_milp_on_synthetic_five_agent_games():
    rng = np.random.default_rng(13)
    for _ in range(10):
        pfg = random_game(rng, 5)
        sol = solve(pfg)
        assert sol.epsilon == pytest.approx(milp_epsilon(pfg), abs=1e-6)
        check_feasible(pfg, sol)


def test_zero_epsilon_means_strong_core():
    rng = np.random.default_rng(19)
    for _ in range(50):
        pfg = build_pfg(sample_instance(rng, n_bar=5, lanes=int(rng.integers(1, 4))))
        sol = solve(pfg)
        if sol.epsilon <= 1e-9:
            assert is_in_strong_core(pfg, sol.x).stable
        if is_in_strong_core(pfg, externality_free_value(pfg)).stable:
            assert sol.epsilon <= 1e-9


def test_positive_epsilon_leaves_the_core():
    rng = np.random.default_rng(23)
    for _ in range(20):
        pfg = random_game(rng, 3)
        sol = solve(pfg)
        if sol.epsilon > 1e-6:
            assert not is_in_strong_core(pfg, sol.x).stable


def test_minimal_epsilon_of_the_solution():
    rng = np.random.default_rng(29)
    for _ in range(20):
        pfg = random_game(rng, 4)
        program = build_program(pfg)
        sol = solve_exact(program)
        eps, choice = minimal_epsilon(program, sol.x)
        assert eps == pytest.approx(sol.epsilon, abs=1e-7)
        assert set(choice) == set(range(len(program.disjunctions)))


def test_solution_is_deterministic():
    rng = np.random.default_rng(37)
    pfg = random_game(rng, 4)
    first, second = solve(pfg), solve(pfg)
    assert first.x == second.x
    assert first.epsilon == second.epsilon
    assert first.enforced == second.enforced


def test_enforced_block_is_the_earliest_satisfied_one():
    rng = np.random.default_rng(43)
    for _ in range(20):
        pfg = random_game(rng, 4)
        program = build_program(pfg)
        sol = solve_exact(program)
        assert set(sol.enforced) == {d.partition for d in program.disjunctions}
        for partition, coalition in sol.enforced.items():
            blocks = partition.non_singleton_blocks()
            satisfied = [S for S in blocks if sol.x.total(S) >= pfg.value(S, partition) - sol.epsilon - 1e-7]
            assert coalition == satisfied[0]


def test_dynamic_epoch_single_participant():
    pfg = build_pfg(VerticalInstance(thetas=[3.0], queues=[2]))
    payments, sol = solve_dynamic_epoch(pfg, [0.0], [-6.0])
    assert payments == (0.0,)
    assert sol.epsilon == 0.0


def test_dynamic_epoch_is_budget_balanced():
    rng = np.random.default_rng(41)
    for _ in range(30):
        inst = sample_instance(rng, n_bar=5, lanes=int(rng.integers(1, 4)))
        pfg = build_pfg(inst)
        grand_values = pfg.plays[grand_partition(inst.n)].agent_values
        pi_prev = [round(float(v), 2) for v in rng.normal(0, 5, size=inst.n)]

        payments, sol = solve_dynamic_epoch(pfg, pi_prev, grand_values)
        assert abs(math.fsum(payments) + math.fsum(pi_prev)) <= 1e-9
        for i in range(inst.n):
            assert payments[i] == pytest.approx(grand_values[i] - pi_prev[i] - sol.x[i], abs=1e-6)

        payments, _ = solve_dynamic_epoch(pfg, [0.0] * inst.n, grand_values)
        assert abs(math.fsum(payments)) <= 1e-9


def test_program_dump():
    pfg = build_pfg(VerticalInstance(thetas=[13, 2, 14, 41], queues=[4, 1]))
    program = build_program(pfg)
    sol = solve_exact(program)
    dump = program_to_json(program, sol)

    assert dump["n"] == 4
    assert dump["shape"] == program.shape()
    assert len(dump["group_rows"]) == len(program.rows)
    assert len(dump["individual_rows"]) == 4
    for row in dump["group_rows"] + dump["individual_rows"]:
        assert row["slack"] >= -1e-7
    assert {row["z"] for row in dump["group_rows"]} <= {0, 1}
    enforced_rows = [tuple(map(tuple, row["partition"])) for row in dump["group_rows"] if row["z"] == 0]
    assert len(enforced_rows) == len(set(enforced_rows)) == len(program.disjunctions)
    assert dump["solution"]["epsilon"] == pytest.approx(sol.epsilon, abs=1e-9)

    bare = program_to_json(program)
    assert "solution" not in bare
    assert "z" not in bare["group_rows"][0]
