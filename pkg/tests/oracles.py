"""
    Independent reference implementations used as test oracles.

    They share no code with the package beyond its data types and are
    written for clarity, not speed: full histories instead of aggregated
    states, permutations instead of coefficient tables, and enumeration
    instead of branching.
"""
import itertools
from math import factorial

import numpy as np
from scipy.optimize import Bounds, LinearConstraint, linprog, milp

from lanetrade.partitions import Coalition, enumerate_partitions
from lanetrade.pfg import PartitionFunctionGame

TIE = 1e-9


def bell_numbers(count):
    """Bell triangle: B(1), ..., B(count)."""
    row = [1]
    res = []
    for _ in range(count):
        res.append(row[-1])
        nxt = [row[-1]]
        for v in row:
            nxt.append(nxt[-1] + v)
        row = nxt
    return res


def _best_play(level, history, n, lanes, block_ids, own_value, highest_lane=False):
    """
    Sequentially rational play from `history` on: list of valuations of agents level..n-1.
    Ties go to the lowest lane, or to the highest one with `highest_lane`.
    """
    if level == n:
        return []

    best = None
    for lane in range(lanes):
        own = own_value(level, history, lane)
        rest = _best_play(level + 1, history + (lane,), n, lanes, block_ids, own_value, highest_lane)
        score = own + sum(v for j, v in enumerate(rest, start=level + 1) if block_ids[j] == block_ids[level])
        if best is None or score > best[0] + TIE or (highest_lane and score >= best[0] - TIE):
            best = (score, [own] + rest)
    return best[1]


def brute_force_vertical(instance, partition, highest_lane=False):
    """Coalition values of the vertical game, walking every lane history."""

    def own_value(level, history, lane):
        d = instance.queues[lane] + history.count(lane) - (1 if instance.delay_offset else 0)
        return -instance.thetas[level] * d

    vals = _best_play(0, (), instance.n, instance.lanes, partition.rgs, own_value, highest_lane)
    return {block: sum(vals[i] for i in block) for block in partition.blocks}


def brute_force_epoch(thetas, etas, tails, headway, partition):
    """Coalition values of the epoch game by recomputing departures along every history."""

    def own_value(level, history, lane):
        prev = tails[lane]
        for j, l in enumerate(history):
            if l == lane:
                prev = etas[j] if prev is None else max(prev + headway, etas[j])
        dep = etas[level] if prev is None else max(prev + headway, etas[level])
        return -thetas[level] * (dep - etas[level])

    vals = _best_play(0, (), len(thetas), len(tails), partition.rgs, own_value)
    return {block: sum(vals[i] for i in block) for block in partition.blocks}


def best_total_sequence(thetas, etas, tails, headway):
    """max over all lane sequences of the summed valuations."""
    best = -np.inf
    for seq in itertools.product(range(len(tails)), repeat=len(thetas)):
        lane_tails = list(tails)
        total = 0.0
        for i, lane in enumerate(seq):
            prev = lane_tails[lane]
            dep = etas[i] if prev is None else max(prev + headway, etas[i])
            total -= thetas[i] * (dep - etas[i])
            lane_tails[lane] = dep
        best = max(best, total)
    return best


def permutation_shapley(n, worth):
    """Average marginal contribution over all orders; worth(Coalition) for non-empty coalitions."""

    def w(mask):
        return worth(Coalition(mask)) if mask else 0.0

    phi = [0.0] * n
    for order in itertools.permutations(range(n)):
        mask = 0
        for i in order:
            phi[i] += w(mask | 1 << i) - w(mask)
            mask |= 1 << i
    return [p / factorial(n) for p in phi]


def _program_rows(pfg):
    rows, groups = [], []
    for partition in enumerate_partitions(pfg.n):
        if partition.is_singletons() or partition.is_grand():
            continue
        idx = []
        for block in partition.non_singleton_blocks():
            idx.append(len(rows))
            rows.append((block, pfg.value(block, partition)))
        groups.append(idx)
    worths = list(pfg.values.values())
    big_m = max(worths) - min(worths) + 1.0
    return rows, groups, big_m


def enumerate_epsilon(pfg):
    """Least eps over every choice of one enforced block per partition, one LP each."""
    n = pfg.n
    rows, groups, big_m = _program_rows(pfg)
    individual = [pfg.singleton_value(i) for i in range(n)]

    best = np.inf
    for choice in itertools.product(*groups):
        enforced = set(choice)
        A, b = [], []
        for k, (block, worth) in enumerate(rows):
            a = [-1.0 if i in block else 0.0 for i in range(n)] + [-1.0]
            A.append(a)
            b.append(-worth + (0.0 if k in enforced else big_m))
        for i in range(n):
            A.append([-1.0 if j == i else 0.0 for j in range(n)] + [-1.0])
            b.append(-individual[i])
        res = linprog(
            [0.0] * n + [1.0],
            A_ub=np.array(A),
            b_ub=np.array(b),
            A_eq=np.array([[1.0] * n + [0.0]]),
            b_eq=[pfg.grand_value],
            bounds=[(None, None)] * n + [(0.0, None)],
            method="highs",
        )
        assert res.status == 0, res.message
        best = min(best, res.fun)
    return best


def milp_epsilon(pfg):
    """The same program handed to scipy's MILP solver."""
    n = pfg.n
    rows, groups, big_m = _program_rows(pfg)
    R = len(rows)
    nv = n + 1 + R

    A, lo, hi = [], [], []
    for k, (block, worth) in enumerate(rows):
        a = np.zeros(nv)
        for i in block:
            a[i] = 1.0
        a[n] = 1.0
        a[n + 1 + k] = big_m
        A.append(a)
        lo.append(worth)
        hi.append(np.inf)
    for i in range(n):
        a = np.zeros(nv)
        a[i] = a[n] = 1.0
        A.append(a)
        lo.append(pfg.singleton_value(i))
        hi.append(np.inf)
    for idx in groups:
        a = np.zeros(nv)
        a[[n + 1 + k for k in idx]] = 1.0
        A.append(a)
        lo.append(-np.inf)
        hi.append(len(idx) - 1.0)
    a = np.zeros(nv)
    a[:n] = 1.0
    A.append(a)
    lo.append(pfg.grand_value)
    hi.append(pfg.grand_value)

    c = np.zeros(nv)
    c[n] = 1.0
    lb = np.array([-np.inf] * n + [0.0] + [0.0] * R)
    ub = np.array([np.inf] * (n + 1) + [1.0] * R)
    integrality = np.array([0] * (n + 1) + [1] * R)

    res = milp(
        c,
        constraints=LinearConstraint(np.array(A), lo, hi),
        integrality=integrality,
        bounds=Bounds(lb, ub),
        options={"mip_rel_gap": 0.0},
    )
    assert res.status == 0, res.message
    return res.fun


def tabulated_game(n, worth):
    """A full PFG with v(S, P) = worth(S, P)."""
    pfg = PartitionFunctionGame(n=n)
    for partition in enumerate_partitions(n):
        for block in partition.blocks:
            pfg.values[(block, partition)] = float(worth(block, partition))
    return pfg


def random_game(rng, n):
    return tabulated_game(n, lambda S, P: round(float(rng.uniform(-20, 5)), 3))
