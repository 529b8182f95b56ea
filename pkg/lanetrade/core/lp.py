import dataclasses
import logging

import numpy as np
from scipy.optimize import linprog

logger = logging.getLogger(__name__)

"""

    Thin layer over scipy's HiGHS linear programming.

    Every program built in this package is feasible by construction (epsilon
    can always grow), so any status other than "optimal" is a numerical
    failure and raised, never returned.

"""

LP_METHOD = "highs"

STATUS = {
    1: "iteration limit reached",
    2: "infeasible",
    3: "unbounded",
    4: "numerical difficulties",
}


class SolverError(RuntimeError):
    pass


@dataclasses.dataclass
class LPResult:
    x: np.ndarray
    fun: float


def solve_lp(c, A_ub=None, b_ub=None, A_eq=None, b_eq=None, bounds=None) -> LPResult:
    c = np.asarray(c, dtype=float)

    # sparse matrices have no len()
    if A_ub is not None and np.shape(A_ub)[0] == 0:
        A_ub, b_ub = None, None

    res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq, bounds=bounds, method=LP_METHOD)

    if res.status != 0:
        reason = STATUS.get(res.status, "unknown status")
        logger.debug("LP failed: %s (%s)", reason, res.message)
        raise SolverError(f"LP {reason}: {res.message}")

    return LPResult(x=np.asarray(res.x, dtype=float), fun=float(res.fun))
