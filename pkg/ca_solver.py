"""Pairwise collision-avoidance step: dual variables along a predicted horizon."""
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from dual_distance import DualStatus, solve_dual_distance, support_multiplier
from geometry import DistNmpcError, enumerate_vertices

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DualPairTrajectory:
    """
    Duals for one robot pair over horizon steps k=1..N (row k-1).

    Row convention: A_i^T lambda_ij + s = 0 and A_j^T lambda_ji - s = 0, so s
    points from robot j toward robot i.
    """
    pair: tuple
    lambda_ij: np.ndarray
    lambda_ji: np.ndarray
    s: np.ndarray
    objective: np.ndarray
    infeasible: np.ndarray
    statuses: tuple
    solutions: tuple = field(default=(), repr=False)
    solve_time: float = 0.0

    @property
    def horizon(self):
        return len(self.objective)

    @property
    def any_infeasible(self):
        return bool(np.any(self.infeasible))

    def for_robot(self, robot_id):
        """(lambda_ego, lambda_other, s_ego) seen from one member of the pair"""
        if robot_id == self.pair[0]:
            return self.lambda_ij, self.lambda_ji, self.s
        if robot_id == self.pair[1]:
            return self.lambda_ji, self.lambda_ij, -self.s
        raise KeyError(f"Robot {robot_id} is not part of pair {self.pair}")

    def shifted(self, steps=1):
        """Drop the first `steps` rows and repeat the last one"""
        if steps <= 0:
            return self
        N = self.horizon
        index = np.minimum(np.arange(N) + steps, N - 1)
        return DualPairTrajectory(
            pair=self.pair,
            lambda_ij=self.lambda_ij[index],
            lambda_ji=self.lambda_ji[index],
            s=self.s[index],
            objective=self.objective[index],
            infeasible=self.infeasible[index],
            statuses=tuple(self.statuses[k] for k in index),
            solutions=tuple(self.solutions[k] for k in index) if self.solutions else (),
            solve_time=self.solve_time,
        )


def _center(P):
    if P.n == 2:
        return enumerate_vertices(P).mean(axis=0)
    return np.linalg.lstsq(P.A, P.b, rcond=None)[0]


def _push_apart(P_i, P_j, previous):
    """
    Duals for a step without an optimal solution. A failed step reuses the last
    optimal direction; an overlapping step separates along the line between the
    centers. The multipliers are recomputed so the equalities hold exactly.
    """
    if previous is not None and previous.status == DualStatus.OPTIMAL and np.any(previous.s):
        s = previous.s
    else:
        gap = _center(P_i) - _center(P_j)
        norm = np.linalg.norm(gap)
        s = gap / norm if norm > 1e-9 else np.eye(P_i.n)[0]
    lambda_ij, _ = support_multiplier(P_i, s)
    lambda_ji, _ = support_multiplier(P_j, -s)
    return lambda_ij, lambda_ji, s


def solve_ca_pair(polytopes_i, polytopes_j, d_min, pair=(0, 1), warm=None):
    """
    Solve the dual distance problem at every horizon step of two predicted
    polytope sequences. Steps whose distance falls below d_min are flagged.
    Every step carries a unit s, overlapping and failed steps included.
    """
    if len(polytopes_i) != len(polytopes_j):
        raise DistNmpcError(f"Prediction lengths differ: {len(polytopes_i)} vs {len(polytopes_j)}")

    start = time.perf_counter()
    warm_solutions = warm.solutions if warm is not None and len(warm.solutions) == len(polytopes_i) else None
    solutions, rows = [], []
    for k, (P_i, P_j) in enumerate(zip(polytopes_i, polytopes_j)):
        previous = warm_solutions[k] if warm_solutions else None
        sol = solve_dual_distance(P_i, P_j, warm=previous)
        solutions.append(sol)
        if sol.status == DualStatus.OPTIMAL:
            rows.append((sol.lambda_12, sol.lambda_21, sol.s))
        else:
            rows.append(_push_apart(P_i, P_j, previous if sol.status == DualStatus.FAILED else None))

    objective = np.array([sol.distance for sol in solutions])
    statuses = tuple(sol.status for sol in solutions)
    infeasible = np.array([
        sol.status != DualStatus.OPTIMAL or sol.distance < d_min - 1e-9 for sol in solutions
    ])
    if infeasible.any():
        steps = np.flatnonzero(infeasible) + 1
        logger.info(f"Pair {pair}: predicted distance below d_min={d_min} at steps {steps.tolist()}")

    return DualPairTrajectory(
        pair=tuple(pair),
        lambda_ij=np.array([row[0] for row in rows]),
        lambda_ji=np.array([row[1] for row in rows]),
        s=np.array([row[2] for row in rows]),
        objective=objective,
        infeasible=infeasible,
        statuses=statuses,
        solutions=tuple(solutions),
        solve_time=time.perf_counter() - start,
    )


def initialize_duals(pairs, initial_polytopes, horizon, d_min):
    """Duals from the initial configuration, replicated over the horizon"""
    duals = {}
    for i, j in pairs:
        single = solve_ca_pair([initial_polytopes[i]], [initial_polytopes[j]], d_min, pair=(i, j))
        if single.any_infeasible:
            logger.warning(f"Pair {(i, j)} starts closer than d_min={d_min} "
                           f"(distance {single.objective[0]:.3f})")
        index = np.zeros(horizon, dtype=int)
        duals[(i, j)] = DualPairTrajectory(
            pair=(i, j),
            lambda_ij=single.lambda_ij[index],
            lambda_ji=single.lambda_ji[index],
            s=single.s[index],
            objective=single.objective[index],
            infeasible=single.infeasible[index],
            statuses=single.statuses * horizon,
            solutions=single.solutions * horizon,
            solve_time=single.solve_time,
        )
    return duals
