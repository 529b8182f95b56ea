import dataclasses
import logging
import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse

from lanetrade.core.lp import SolverError, solve_lp
from lanetrade.partitions import Coalition, Partition, enumerate_partitions
from lanetrade.pfg import (
    Imputation,
    PartitionFunctionGame,
    assert_efficient,
    externality_free_value,
    mcquillin_value,
)
from lanetrade.utils.helpers import TOLERANCE, clean_float

logger = logging.getLogger(__name__)

"""

    The epsilon strong-core program.

        min eps
        s.t.  x(S_j) >= v(S_j, P) - eps - M z_jp   for every non-singleton block S_j of P,
                                                  for every P other than [N] and {N}
              x_i >= v({i}, [N]) - eps
              x(N) = v(N, {N})
              sum_j z_jp <= |non-singleton blocks of P| - 1
              eps >= 0, z binary

    Every partition is a disjunction: at least one of its non-singleton
    blocks must be (eps-)satisfied. The branch-and-bound below branches on
    whole disjunctions, a child per block of the partition, with that block
    enforced (z = 0) and the others relaxed by M (z = 1). Undecided
    disjunctions keep their z continuous in [0, 1], which is the usual LP
    relaxation of the program.

    Upper bounds come from `minimal_epsilon`: for any efficient x the least
    eps making it feasible is a max/min over the rows, so the externality-free
    and McQuillin values and every LP point yield incumbents for free. Most
    vertical games are settled by the first incumbent reaching eps = 0.

"""

MAX_NODE_COUNT = 20_000


class NodeLimitExceeded(SolverError):
    pass


@dataclasses.dataclass
class GroupRow:
    partition: Partition
    coalition: Coalition
    worth: float


@dataclasses.dataclass
class Disjunction:
    partition: Partition
    rows: Tuple[int, ...]


@dataclasses.dataclass
class EpsilonProgram:
    pfg: PartitionFunctionGame
    rows: List[GroupRow]
    disjunctions: List[Disjunction]
    individual: Tuple[float, ...]
    grand: float
    big_m: float
    anchor: Imputation
    # rows x agents 0/1 matrix
    membership: np.ndarray = dataclasses.field(default=None, repr=False)

    def __post_init__(self):
        if self.membership is None:
            self.membership = np.array(
                [[1.0 if i in row.coalition else 0.0 for i in range(self.n)] for row in self.rows]
            ).reshape(len(self.rows), self.n)
        self.worths = np.array([row.worth for row in self.rows], dtype=float)

    @property
    def n(self) -> int:
        return self.pfg.n

    @property
    def num_vars(self) -> int:
        return self.n + 1 + len(self.rows)

    def shape(self) -> Dict[str, int]:
        return {
            "group_rows": len(self.rows),
            "individual_rows": self.n,
            "cardinality_rows": len(self.disjunctions),
            "equality_rows": 1,
        }


@dataclasses.dataclass
class EpsilonSolution:
    x: Imputation
    epsilon: float
    # one block per partition: the earliest block of the partition that x satisfies
    enforced: Dict[Partition, Coalition]
    nodes: int = 0

    def to_json(self) -> dict:
        return {
            "x": self.x.to_json(),
            "epsilon": clean_float(self.epsilon),
            "nodes": self.nodes,
            "enforced": [
                {"partition": p.to_json(), "coalition": c.to_json()} for p, c in self.enforced.items()
            ],
        }


def build_program(pfg: PartitionFunctionGame, anchor: Optional[Imputation] = None) -> EpsilonProgram:
    n = pfg.n
    pfg.check_complete()

    worths = list(pfg.values.values())
    big_m = (max(worths) - min(worths)) + 1.0

    rows: List[GroupRow] = []
    disjunctions = []
    for partition in enumerate_partitions(n):
        if partition.is_singletons() or partition.is_grand():
            continue

        idx = []
        for block in partition.non_singleton_blocks():
            idx.append(len(rows))
            rows.append(GroupRow(partition, block, pfg.value(block, partition)))
        disjunctions.append(Disjunction(partition, tuple(idx)))

    # most demanding disjunctions first
    disjunctions.sort(key=lambda d: -max(rows[r].worth for r in d.rows))

    program = EpsilonProgram(
        pfg=pfg,
        rows=rows,
        disjunctions=disjunctions,
        individual=tuple(pfg.singleton_value(i) for i in range(n)),
        grand=pfg.grand_value,
        big_m=big_m,
        anchor=anchor if anchor is not None else externality_free_value(pfg),
    )
    logger.debug("program for %d agents: %s, M=%s", n, program.shape(), big_m)
    return program


#
#  Incumbents
#


def _coalition_sums(program: EpsilonProgram, x) -> np.ndarray:
    return program.membership @ np.asarray(x, dtype=float)[: program.n]


def minimal_epsilon(program: EpsilonProgram, x) -> Tuple[float, Dict[int, int]]:
    """
    Least eps >= 0 for which x is feasible, and the row enforced in each
    disjunction (index into program.disjunctions -> index into program.rows).
    """
    x = list(x)
    deficit = program.worths - _coalition_sums(program, x)

    eps = 0.0
    for i in range(program.n):
        eps = max(eps, program.individual[i] - x[i])
    if len(deficit):
        eps = max(eps, float(deficit.max()) - program.big_m)

    choice = {}
    for d_idx, d in enumerate(program.disjunctions):
        best = min(d.rows, key=lambda r: (deficit[r], r))
        choice[d_idx] = best
        eps = max(eps, float(deficit[best]))

    return eps, choice


#
#  LP relaxations
#


class _Relaxation:
    """Constraint matrix shared by every node; nodes only move z bounds."""

    def __init__(self, program: EpsilonProgram):
        self.program = program
        n, R = program.n, len(program.rows)
        eps_col = n

        data, ri, ci, b = [], [], [], []
        r = 0
        for k, row in enumerate(program.rows):
            for i in row.coalition:
                data.append(-1.0)
                ri.append(r)
                ci.append(i)
            data += [-1.0, -program.big_m]
            ri += [r, r]
            ci += [eps_col, n + 1 + k]
            b.append(-row.worth)
            r += 1

        for i in range(n):
            data += [-1.0, -1.0]
            ri += [r, r]
            ci += [i, eps_col]
            b.append(-program.individual[i])
            r += 1

        for d in program.disjunctions:
            for k in d.rows:
                data.append(1.0)
                ri.append(r)
                ci.append(n + 1 + k)
            b.append(len(d.rows) - 1.0)
            r += 1

        self.A_ub = sparse.csr_matrix((data, (ri, ci)), shape=(r, program.num_vars))
        self.b_ub = np.array(b)
        self.A_eq = sparse.csr_matrix(np.array([[1.0] * n + [0.0] * (1 + R)]))
        self.b_eq = np.array([program.grand])
        self.c = np.zeros(program.num_vars)
        self.c[eps_col] = 1.0

    def bounds(self, fixed: Dict[int, int], eps_max=None):
        program = self.program
        bounds = [(None, None)] * program.n + [(0.0, eps_max)]
        z = [(0.0, 1.0)] * len(program.rows)
        for d_idx, chosen in fixed.items():
            for k in program.disjunctions[d_idx].rows:
                z[k] = (0.0, 0.0) if k == chosen else (1.0, 1.0)
        return bounds + z

    def solve(self, fixed: Dict[int, int]):
        return solve_lp(
            self.c, A_ub=self.A_ub, b_ub=self.b_ub, A_eq=self.A_eq, b_eq=self.b_eq, bounds=self.bounds(fixed)
        )

    def closest(self, choice: Dict[int, int], eps: float, target: Sequence[float]):
        """Among the points feasible at eps under `choice`, the one nearest `target` in L1."""
        program = self.program
        n = program.n
        # extra variables t_i >= |x_i - target_i|
        A_ub = sparse.hstack([self.A_ub, sparse.csr_matrix((self.A_ub.shape[0], n))])
        dist = []
        for i in range(n):
            up = np.zeros(program.num_vars + n)
            up[i], up[program.num_vars + i] = 1.0, -1.0
            down = -up
            down[program.num_vars + i] = -1.0
            dist += [up, down]
        A_ub = sparse.vstack([A_ub, sparse.csr_matrix(np.array(dist))]).tocsr()
        b_ub = np.concatenate([self.b_ub, np.array([v for t in target for v in (t, -t)])])
        A_eq = sparse.hstack([self.A_eq, sparse.csr_matrix((1, n))]).tocsr()
        c = np.concatenate([np.zeros(program.num_vars), np.ones(n)])
        bounds = self.bounds(choice, eps_max=eps) + [(0.0, None)] * n
        return solve_lp(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=self.b_eq, bounds=bounds)


def _branching_disjunction(program: EpsilonProgram, fixed, point) -> Optional[int]:
    """The undecided disjunction most violated at the relaxation point, earliest
    in branch order on ties. None when the point satisfies all of them."""
    n = program.n
    deficit = program.worths - _coalition_sums(program, point)
    eps = point[n]

    worst, worst_idx = TOLERANCE, None
    for d_idx, d in enumerate(program.disjunctions):
        if d_idx in fixed:
            continue
        violation = min(deficit[k] for k in d.rows) - eps
        if violation > worst:
            worst, worst_idx = violation, d_idx

    return worst_idx


def solve_exact(program: EpsilonProgram) -> EpsilonSolution:
    n = program.n

    best_eps, best_choice = float("inf"), None
    for candidate in (program.anchor, mcquillin_value(program.pfg)):
        eps, choice = minimal_epsilon(program, candidate)
        if eps < best_eps - TOLERANCE:
            best_eps, best_choice = eps, choice

    relaxation = _Relaxation(program)
    nodes = 0

    if best_eps > TOLERANCE and program.disjunctions:
        stack: List[Dict[int, int]] = [{}]

        while stack:
            fixed = stack.pop()
            nodes += 1
            if nodes > MAX_NODE_COUNT:
                raise NodeLimitExceeded(f"more than {MAX_NODE_COUNT} nodes, best eps so far {best_eps}")

            lp = relaxation.solve(fixed)
            bound = lp.x[n]
            if bound >= best_eps - TOLERANCE:
                continue

            eps, choice = minimal_epsilon(program, lp.x[:n])
            if eps < best_eps - TOLERANCE:
                best_eps, best_choice = eps, choice
                logger.debug("node %d: incumbent eps %s", nodes, best_eps)
                if best_eps <= TOLERANCE:
                    break
            if bound >= best_eps - TOLERANCE:
                continue

            d_idx = _branching_disjunction(program, fixed, lp.x)
            if d_idx is None:
                # the relaxation point is itself feasible
                continue

            for k in reversed(program.disjunctions[d_idx].rows):
                child = dict(fixed)
                child[d_idx] = k
                stack.append(child)

    elif not program.disjunctions:
        # only IR and efficiency rows: a single LP
        lp = relaxation.solve({})
        eps, choice = minimal_epsilon(program, lp.x[:n])
        if eps < best_eps - TOLERANCE:
            best_eps, best_choice = eps, choice
        nodes = 1

    best_eps = max(0.0, best_eps)

    try:
        lp = relaxation.closest(best_choice, best_eps, program.anchor.x)
        x = Imputation(lp.x[:n])
    except SolverError:
        logger.debug("secondary objective failed, keeping the incumbent", exc_info=True)
        x = None

    if x is None or minimal_epsilon(program, x)[0] > best_eps + 1e-7:
        x = _incumbent_point(program, best_choice, best_eps, relaxation)

    return _finish(program, x, best_eps, nodes)


def _incumbent_point(program, choice, eps, relaxation):
    lp = solve_lp(
        relaxation.c,
        A_ub=relaxation.A_ub,
        b_ub=relaxation.b_ub,
        A_eq=relaxation.A_eq,
        b_eq=relaxation.b_eq,
        bounds=relaxation.bounds(choice, eps_max=eps + TOLERANCE),
    )
    return Imputation(lp.x[: program.n])


def _finish(program: EpsilonProgram, x: Imputation, eps: float, nodes: int) -> EpsilonSolution:
    assert_efficient(program.pfg, x, tol=1e-7)

    sums = _coalition_sums(program, x.x)
    enforced = {}
    for d in program.disjunctions:
        ok = [k for k in d.rows if sums[k] >= program.rows[k].worth - eps - 1e-7]
        assert ok, f"no coalition of {d.partition} satisfied at eps={eps}"
        enforced[d.partition] = program.rows[min(ok)].coalition

    for i in range(program.n):
        assert x[i] >= program.individual[i] - eps - 1e-7, (i, x[i], program.individual[i], eps)

    return EpsilonSolution(x=x, epsilon=eps, enforced=enforced, nodes=nodes)


def solve_dynamic_epoch(
    pfg_t: PartitionFunctionGame, pi_prev: Sequence[float], grand_values: Sequence[float]
) -> Tuple[Tuple[float, ...], EpsilonSolution]:
    """
    One epoch of the dynamic exchange: x_i = v_i(N, {N}) - p_i - pi_i, so
    payments follow from the epoch imputation, and they sum to minus the
    payments already made by the participants.
    """
    n = pfg_t.n
    assert len(pi_prev) == n and len(grand_values) == n, (pi_prev, grand_values)

    solution = solve_exact(build_program(pfg_t))
    payments = [grand_values[i] - pi_prev[i] - solution.x[i] for i in range(n)]

    drift = math.fsum(payments) + math.fsum(pi_prev)
    assert abs(drift) <= 1e-6 * max(1.0, abs(pfg_t.grand_value)), (payments, pi_prev)
    # the LP meets x(N) = v(N, {N}) only up to its feasibility tolerance
    payments[-1] = -math.fsum(pi_prev) - math.fsum(payments[:-1])

    return tuple(payments), solution


def program_to_json(program: EpsilonProgram, solution: Optional[EpsilonSolution] = None) -> dict:
    res = {
        "n": program.n,
        "big_m": clean_float(program.big_m),
        "grand_value": clean_float(program.grand),
        "shape": program.shape(),
        "group_rows": [],
        "individual_rows": [],
    }

    sums = _coalition_sums(program, solution.x.x) if solution else None
    eps = solution.epsilon if solution else None

    for k, row in enumerate(program.rows):
        item = {
            "partition": row.partition.to_json(),
            "coalition": row.coalition.to_json(),
            "worth": clean_float(row.worth),
        }
        if solution:
            z = 0 if row.coalition == solution.enforced[row.partition] else 1
            item["z"] = z
            item["slack"] = clean_float(float(sums[k] - (row.worth - eps - program.big_m * z)))
        res["group_rows"].append(item)

    for i in range(program.n):
        item = {"agent": i + 1, "worth": clean_float(program.individual[i])}
        if solution:
            item["slack"] = clean_float(solution.x[i] - (program.individual[i] - eps))
        res["individual_rows"].append(item)

    if solution:
        res["solution"] = solution.to_json()
    return res
