"""
Closed-loop simulation of the team.

Distributed mode runs synchronous rounds: every robot solves its NMPC against
the neighbor predictions and pair duals published in the previous round,
publishes its own shifted prediction, then the lower-indexed robot of each pair
solves that pair's dual distance problem and publishes the duals. Centralized
mode replaces the round with one joint solve.
"""
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from ca_solver import initialize_duals, solve_ca_pair
from dynamics import rollout
from error_bound import (
    DEFAULT_ERROR_BOX,
    alpha_min,
    direct_pinv_norm,
    dist_predicted_by_i,
    dist_predicted_by_j,
    footprint_vector,
    normalization_ratio,
    polytope_constant,
    prediction_error,
    theorem1_bound,
    trivial_bound,
)
from geometry import DistNmpcError, GeometryError, oracle_distance
from nmpc import (
    CentralizedProblem,
    CouplingMode,
    ErrorBoundHook,
    LocalNmpcProblem,
    NeighborCoupling,
    NmpcSolution,
    NmpcStatus,
    fallback_solution,
    shift_and_augment,
    solve_centralized_nmpc,
    solve_local_nmpc,
    stage_cost,
)

logger = logging.getLogger(__name__)

PREDICTION_TOPIC = "prediction"
DUALS_TOPIC = "duals"


class InfeasibleRunError(DistNmpcError):
    """Raised when NMPC stays infeasible for too many consecutive steps"""

    def __init__(self, message, log):
        super().__init__(message)
        self.log = log


@dataclass
class RobotAgent:
    robot_id: int
    model: object
    weights: object
    reference: object
    bounds: object
    state: np.ndarray
    last_input: np.ndarray
    state_box: object = None
    solution: object = None

    @property
    def shape(self):
        return self.model.shape

    def polytope(self):
        return self.model.polytope(self.state)


def neighbor_sets(robots, radius=None):
    """
    Symmetric neighbor map {robot_id: set of robot_ids}: j is a neighbor of i
    when their centers are within `radius`. No radius means a complete graph.
    """
    if radius is not None and radius <= 0:
        raise DistNmpcError(f"Communication radius must be positive, got {radius}")
    neighbors = {robot.robot_id: set() for robot in robots}
    for a, robot_i in enumerate(robots):
        for robot_j in robots[a + 1:]:
            gap = float(np.linalg.norm(np.asarray(robot_i.state[:2]) - np.asarray(robot_j.state[:2])))
            if radius is None or math.isinf(radius) or gap <= radius:
                neighbors[robot_i.robot_id].add(robot_j.robot_id)
                neighbors[robot_j.robot_id].add(robot_i.robot_id)
    return neighbors


@dataclass
class World:
    name: str
    robots: list
    dt: float
    horizon: int
    d_min: float
    steps: int
    mode: str = "distributed"
    obstacles: list = field(default_factory=list)
    communication_radius: float = None
    bus_delay: int = 0
    coupling_mode: CouplingMode = CouplingMode.SUPPORT
    trace_error_bound: bool = False
    error_box: tuple = DEFAULT_ERROR_BOX
    alpha_constraint: bool = False
    ratio_weight: float = 0.0
    max_infeasible_steps: int = 5
    max_iterations: int = 100

    def robot(self, robot_id):
        return next(robot for robot in self.robots if robot.robot_id == robot_id)

    def pairs(self):
        """Neighbor pairs (i < j) from the current positions"""
        neighbors = neighbor_sets(self.robots, self.communication_radius)
        return sorted((i, j) for i, others in neighbors.items() for j in others if i < j)


@dataclass(frozen=True)
class Prediction:
    """Shifted prediction for the times t+2 .. t+N+1 published at step t"""
    states: np.ndarray
    polytopes: tuple

    def shifted(self, steps):
        if steps <= 0:
            return self
        N = len(self.states)
        index = np.minimum(np.arange(N) + steps, N - 1)
        return Prediction(self.states[index], tuple(self.polytopes[k] for k in index))


class MessageBus:
    """
    Mailbox of stamped publications. A read at step t sees the newest
    publication stamped at or before t - delay.
    """

    def __init__(self, delay=0):
        if delay < 0:
            raise DistNmpcError(f"Bus delay must be non-negative, got {delay}")
        self.delay = delay
        self._messages = {}

    def __len__(self):
        return sum(len(history) for history in self._messages.values())

    def publish(self, topic, key, stamp, payload):
        history = self._messages.setdefault((topic, key), [])
        if history and history[-1][0] >= stamp:
            raise DistNmpcError(f"{key} already published '{topic}' for step {stamp}")
        history.append((stamp, payload))

    def read(self, topic, key, t):
        """(stamp, payload) or None; negative stamps hold initial data and are always visible"""
        visible = t - self.delay
        for stamp, payload in reversed(self._messages.get((topic, key), [])):
            if stamp <= visible or stamp < 0:
                return stamp, payload
        return None

    def latest(self, topic, key):
        history = self._messages.get((topic, key))
        return history[-1] if history else None


@dataclass
class SimulationLog:
    scenario: str
    mode: str
    dt: float
    d_min: float
    trajectory_rows: list = field(default_factory=list)
    timing_rows: list = field(default_factory=list)
    pair_rows: list = field(default_factory=list)
    error_rows: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    steps_completed: int = 0
    aborted: bool = False

    def frame(self, name):
        return pd.DataFrame(getattr(self, f"{name}_rows"))


def _shifted_prediction(robot):
    """The robot's last plan as the prediction for the next round"""
    states = shift_and_augment(robot.solution.states[1:])
    return Prediction(states, tuple(robot.model.polytope(z) for z in states))


def _aligned(bus, topic, key, t):
    """Publication readable in round t, shifted so row 0 is the time t+1"""
    message = bus.read(topic, key, t - 1)
    if message is None:
        return None, None
    stamp, payload = message
    age = (t - 1) - stamp
    return payload.shifted(age), age


def _hold_solution(model, state, last_input, horizon, dt):
    """Initial plan: hold the last input. Row 0 stands for the step before the run starts"""
    inputs = np.tile(last_input, (horizon, 1))
    states = np.vstack([state, rollout(model, state, inputs, dt)[:-1]])
    return NmpcSolution(inputs, states, 0.0, NmpcStatus.CONVERGED, 0.0)


class Coordinator:
    """Runs the rounds of one simulation over a World, mutating robot states in place"""

    def __init__(self, world, log=None, workers=1):
        self.world = world
        self.log = log or SimulationLog(world.name, world.mode, world.dt, world.d_min)
        self.workers = workers
        self.neighbors = neighbor_sets(world.robots, world.communication_radius)
        self.pairs = world.pairs()
        self.bus = MessageBus(world.bus_delay)
        self.obstacle_duals = {}
        self.constants = {robot.robot_id: polytope_constant(robot.shape.A).c for robot in world.robots}
        self.trivial = {}
        for i, j in self.pairs:
            robot_i, robot_j = world.robot(i), world.robot(j)
            if robot_i.state_box is not None and robot_j.state_box is not None:
                self.trivial[(i, j)] = trivial_bound(robot_i.state_box, robot_j.state_box,
                                                     robot_i.shape.A, robot_j.shape.A,
                                                     self.constants[i], self.constants[j])
        self.executor = None
        self.consecutive_infeasible = 0

    def initialize(self):
        world = self.world
        for robot in world.robots:
            robot.solution = _hold_solution(robot.model, robot.state, robot.last_input, world.horizon, world.dt)
            self._publish(robot, -1)
        initial = {robot.robot_id: robot.polytope() for robot in world.robots}
        for pair, duals in initialize_duals(self.pairs, initial, world.horizon, world.d_min).items():
            self.bus.publish(DUALS_TOPIC, pair, -1, duals)
        if self.workers > 1 and world.mode == "distributed":
            self.executor = ThreadPoolExecutor(max_workers=self.workers)

    def close(self):
        if self.executor is not None:
            self.executor.shutdown(wait=True)
            self.executor = None

    def _publish(self, robot, stamp):
        # Robots without neighbors never talk
        if self.neighbors[robot.robot_id]:
            self.bus.publish(PREDICTION_TOPIC, robot.robot_id, stamp, _shifted_prediction(robot))

    def obstacle_couplings(self, robot, own):
        couplings, elapsed = [], 0.0
        for index, obstacle in enumerate(self.world.obstacles):
            key = (robot.robot_id, index)
            duals = solve_ca_pair(list(own.polytopes), [obstacle] * len(own.polytopes), self.world.d_min,
                                  pair=(robot.robot_id, f"obstacle{index}"),
                                  warm=self.obstacle_duals.get(key))
            self.obstacle_duals[key] = duals
            elapsed += duals.solve_time
            couplings.append(NeighborCoupling(f"obstacle{index}", [obstacle] * len(own.polytopes),
                                              duals.lambda_ij, duals.lambda_ji, duals.s, static=True))
        return couplings, elapsed

    def plan(self, robot, t):
        """Solve one robot's NMPC for round t; returns (solution, nmpc_time, ca_time, stale)"""
        world = self.world
        own = _shifted_prediction(robot)
        couplings, stale = [], False
        for j in sorted(self.neighbors[robot.robot_id]):
            prediction, age = _aligned(self.bus, PREDICTION_TOPIC, j, t)
            duals, dual_age = _aligned(self.bus, DUALS_TOPIC, (min(robot.robot_id, j), max(robot.robot_id, j)), t)
            if prediction is None or duals is None or max(age, dual_age) > world.horizon:
                stale = True
                continue
            lambda_ego, lambda_other, s = duals.for_robot(robot.robot_id)
            couplings.append(NeighborCoupling(j, list(prediction.polytopes), lambda_ego, lambda_other, s))

        obstacle_couplings, ca_time = self.obstacle_couplings(robot, own)
        couplings.extend(obstacle_couplings)

        hook = None
        if world.alpha_constraint or world.ratio_weight > 0:
            previous = own.states[0]
            alpha = alpha_min(previous[:3], world.error_box, robot.shape.A)
            hook = ErrorBoundHook(previous_b=footprint_vector(robot.shape.A, robot.shape.b, previous[:3]),
                                  alpha_min=alpha, constrain=world.alpha_constraint,
                                  ratio_weight=world.ratio_weight)

        problem = LocalNmpcProblem(
            model=robot.model,
            initial_state=robot.state,
            horizon=world.horizon,
            dt=world.dt,
            weights=robot.weights,
            reference=robot.reference.window(t, world.horizon),
            bounds=robot.bounds,
            previous_input=robot.last_input,
            couplings=couplings,
            d_min=world.d_min,
            coupling_mode=world.coupling_mode,
            error_hook=hook,
            warm_start=shift_and_augment(robot.solution.inputs),
            max_iterations=world.max_iterations,
        )
        solution = solve_local_nmpc(problem)
        return solution, solution.solve_time, ca_time, stale

    def solve_pairs(self, t):
        """The owner (lower id) of each pair solves its CA problem and publishes the duals"""
        elapsed = {robot.robot_id: 0.0 for robot in self.world.robots}
        for i, j in self.pairs:
            own = self.bus.latest(PREDICTION_TOPIC, i)[1]
            stamp, other = self.bus.read(PREDICTION_TOPIC, j, t)
            other = other.shifted(t - stamp)
            stamp, previous = self.bus.latest(DUALS_TOPIC, (i, j))
            warm = previous.shifted(t - stamp)
            duals = solve_ca_pair(list(own.polytopes), list(other.polytopes), self.world.d_min,
                                  pair=(i, j), warm=warm)
            self.bus.publish(DUALS_TOPIC, (i, j), t, duals)
            elapsed[i] += duals.solve_time
        return elapsed

    def _fall_back(self, robot, t, solution, reason):
        logger.warning(f"Step {t}: robot {robot.robot_id} falls back to its previous plan ({reason})")
        self.log.failures.append({"t": t, "robot_id": robot.robot_id, "reason": reason,
                                  "max_slack": solution.max_slack, "message": solution.message})
        return fallback_solution(robot.model, robot.state, robot.solution, self.world.dt, reason,
                                 bounds=robot.bounds, previous_input=robot.last_input)

    def _distributed_round(self, t):
        world, log = self.world, self.log
        robots = sorted(world.robots, key=lambda robot: robot.robot_id)

        if self.executor is None:
            plans = [self.plan(robot, t) for robot in robots]
        else:
            plans = list(self.executor.map(lambda robot: self.plan(robot, t), robots))

        infeasible, statuses = [], {}
        for robot, (solution, nmpc_time, ca_time, stale) in zip(robots, plans):
            if not solution.usable:
                infeasible.append(robot.robot_id)
                solution = self._fall_back(robot, t, solution, f"NMPC {solution.status.value}")
            elif stale:
                solution = self._fall_back(robot, t, solution, "stale neighbor data")
            robot.solution = solution
            statuses[robot.robot_id] = solution.status.value
            log.timing_rows.append({"t": t, "robot_id": robot.robot_id, "kind": "nmpc", "seconds": nmpc_time})
            if ca_time:
                log.timing_rows.append({"t": t, "robot_id": robot.robot_id, "kind": "ca", "seconds": ca_time})

        if world.trace_error_bound:
            fresh = {robot.robot_id: robot.model.polytope(robot.solution.states[1]) for robot in robots}
            self._trace_errors(t, fresh)

        for robot in robots:
            self._publish(robot, t)
        for robot_id, elapsed in self.solve_pairs(t).items():
            if elapsed:
                log.timing_rows.append({"t": t, "robot_id": robot_id, "kind": "ca", "seconds": elapsed})

        duals = {pair: self.bus.latest(DUALS_TOPIC, pair)[1] for pair in self.pairs}
        return infeasible, statuses, duals

    def _centralized_round(self, t):
        world, log = self.world, self.log
        problems = {}
        for robot in world.robots:
            problems[robot.robot_id] = LocalNmpcProblem(
                model=robot.model,
                initial_state=robot.state,
                horizon=world.horizon,
                dt=world.dt,
                weights=robot.weights,
                reference=robot.reference.window(t, world.horizon),
                bounds=robot.bounds,
                previous_input=robot.last_input,
                warm_start=shift_and_augment(robot.solution.inputs),
            )
        result = solve_centralized_nmpc(CentralizedProblem(problems, self.pairs, world.d_min,
                                                           obstacles=list(world.obstacles),
                                                           max_iterations=2 * world.max_iterations))
        log.timing_rows.append({"t": t, "robot_id": "all", "kind": "centralized", "seconds": result.solve_time})

        infeasible, statuses = [], {}
        for robot in world.robots:
            solution = result.solutions[robot.robot_id]
            if not solution.usable:
                infeasible.append(robot.robot_id)
                solution = self._fall_back(robot, t, solution, "centralized infeasible")
            robot.solution = solution
            statuses[robot.robot_id] = solution.status.value

        if world.trace_error_bound:
            # Both robots of a pair use the same fresh duals, so the perceived distances agree
            for (i, j), duals in result.duals.items():
                P_i = world.robot(i).model.polytope(world.robot(i).solution.states[1])
                P_j = world.robot(j).model.polytope(world.robot(j).solution.states[1])
                dist = dist_predicted_by_i(P_i.b, P_j.b, duals.lambda_ij[0], duals.lambda_ji[0])
                log.error_rows.append({"t": t, "robot_i": i, "robot_j": j, "dist_pi": dist, "dist_pj": dist,
                                       "true_dist": oracle_distance(P_i, P_j), "e_predict": 0.0,
                                       "bound": 0.0, "bound_formula": 0.0,
                                       "trivial_bound": self.trivial.get((i, j), np.nan)})
        return infeasible, statuses, result.duals

    def _trace_errors(self, t, fresh):
        """
        Audit the disagreement between the two perceived pair distances at the
        first horizon step, using the predictions and duals consumed this round.
        """
        world, bus = self.world, self.bus
        for i, j in self.pairs:
            duals, _ = _aligned(bus, DUALS_TOPIC, (i, j), t)
            previous_i, _ = _aligned(bus, PREDICTION_TOPIC, i, t)
            previous_j, _ = _aligned(bus, PREDICTION_TOPIC, j, t)
            if duals is None or previous_i is None or previous_j is None:
                continue
            robot_i, robot_j = world.robot(i), world.robot(j)
            b_i_now, b_j_now = fresh[i].b, fresh[j].b
            b_i_prev, b_j_prev = previous_i.polytopes[0].b, previous_j.polytopes[0].b
            lambda_ij, lambda_ji = duals.lambda_ij[0], duals.lambda_ji[0]
            dist_i = dist_predicted_by_i(b_i_now, b_j_prev, lambda_ij, lambda_ji)
            dist_j = dist_predicted_by_j(b_i_prev, b_j_now, lambda_ij, lambda_ji)
            c_i = direct_pinv_norm(previous_i.polytopes[0].A)
            c_j = direct_pinv_norm(previous_j.polytopes[0].A)
            alpha_i = alpha_min(previous_i.states[0][:3], world.error_box, robot_i.shape.A)
            alpha_j = alpha_min(previous_j.states[0][:3], world.error_box, robot_j.shape.A)
            ratio_i = normalization_ratio(b_i_now, b_i_prev, alpha_i)
            ratio_j = normalization_ratio(b_j_now, b_j_prev, alpha_j)
            try:
                true_distance = oracle_distance(fresh[i], fresh[j])
            except GeometryError:
                true_distance = np.nan
            self.log.error_rows.append({
                "t": t,
                "robot_i": i,
                "robot_j": j,
                "dist_pi": dist_i,
                "dist_pj": dist_j,
                "true_dist": true_distance,
                "e_predict": prediction_error(dist_i, dist_j),
                "bound": theorem1_bound(b_i_now, b_i_prev, b_j_now, b_j_prev, c_i, c_j),
                "bound_formula": theorem1_bound(b_i_now, b_i_prev, b_j_now, b_j_prev,
                                                self.constants[i], self.constants[j]),
                "trivial_bound": self.trivial.get((i, j), np.nan),
                "c_i": c_i,
                "c_j": c_j,
                "alpha_i": alpha_i,
                "alpha_j": alpha_j,
                "ratio_i": np.nan if ratio_i is None else ratio_i,
                "ratio_j": np.nan if ratio_j is None else ratio_j,
            })

    def coordination_step(self, t):
        """
        One closed-loop step: plan (distributed round or joint solve), log,
        apply the first inputs and advance every robot. Returns the applied inputs.
        """
        world, log = self.world, self.log
        if world.mode == "distributed":
            infeasible, statuses, duals = self._distributed_round(t)
        else:
            infeasible, statuses, duals = self._centralized_round(t)

        applied = {robot.robot_id: robot.solution.inputs[0].copy() for robot in world.robots}
        _record_state_rows(world, log, t, applied, statuses)
        for robot in world.robots:
            robot.state = robot.model.step(robot.state, applied[robot.robot_id], world.dt)
            robot.last_input = applied[robot.robot_id]
        log.steps_completed = t + 1
        _record_pair_rows(world, log, t + 1, self.pairs, duals)

        self.consecutive_infeasible = self.consecutive_infeasible + 1 if infeasible else 0
        if self.consecutive_infeasible > world.max_infeasible_steps:
            log.aborted = True
            raise InfeasibleRunError(f"NMPC infeasible for {self.consecutive_infeasible} consecutive steps "
                                     f"(last at step {t})", log)
        return applied


def _record_state_rows(world, log, t, applied, statuses):
    robots = world.robots
    polytopes = {robot.robot_id: robot.polytope() for robot in robots}
    for robot in robots:
        others = [oracle_distance(polytopes[robot.robot_id], polytopes[other.robot_id])
                  for other in robots if other.robot_id != robot.robot_id]
        others += [oracle_distance(polytopes[robot.robot_id], obstacle) for obstacle in world.obstacles]
        u = applied[robot.robot_id]
        z = robot.state
        log.trajectory_rows.append({
            "t": t,
            "time": t * world.dt,
            "robot_id": robot.robot_id,
            "x": z[0],
            "y": z[1],
            "psi": z[2],
            "v": z[3] if len(z) > 3 else np.nan,
            "a_or_v_cmd": u[0],
            "delta": u[1],
            "min_neighbor_dist": min(others) if others else np.nan,
            "nmpc_status": statuses.get(robot.robot_id, ""),
            "stage_cost": stage_cost(z, u, u - robot.last_input, robot.reference.window(t, 0)[0], robot.weights),
        })


def _record_pair_rows(world, log, t, pairs, duals_by_pair):
    polytopes = {robot.robot_id: robot.polytope() for robot in world.robots}
    for i, j in pairs:
        duals = duals_by_pair.get((i, j))
        log.pair_rows.append({
            "t": t,
            "robot_i": i,
            "robot_j": j,
            "distance": oracle_distance(polytopes[i], polytopes[j]),
            "ca_objective": duals.objective[0] if duals is not None else np.nan,
            "ca_infeasible": bool(duals.infeasible[0]) if duals is not None else False,
        })


def run(scenario, steps=None, mode=None, workers=1, trace_error_bound=None):
    """
    Simulate a scenario for `steps` steps in "distributed" or "centralized" mode
    and return the SimulationLog (one trajectory row per robot and step).
    Raises InfeasibleRunError (carrying the partial log) after too many
    consecutive infeasible steps.
    """
    world = scenario if isinstance(scenario, World) else scenario.build_world()
    if steps is not None:
        world.steps = steps
    if mode is not None:
        world.mode = mode
    if trace_error_bound is not None:
        world.trace_error_bound = trace_error_bound
    if world.mode not in ("distributed", "centralized"):
        raise DistNmpcError(f"Unknown mode '{world.mode}'")

    coordinator = Coordinator(world, workers=workers)
    coordinator.initialize()
    logger.info(f"Running '{world.name}' ({world.mode}) with {len(world.robots)} robots "
                f"for {world.steps} steps")

    start = time.perf_counter()
    try:
        for t in range(world.steps):
            coordinator.coordination_step(t)
            if (t + 1) % 50 == 0 or t + 1 == world.steps:
                logger.info(f"Processed step {t + 1}/{world.steps} "
                            f"({time.perf_counter() - start:.1f} s elapsed)")
    finally:
        coordinator.close()
    return coordinator.log


def audit_safety(log, tolerance=1e-6):
    """Pair rows whose realized distance is below d_min - tolerance"""
    pairs = log.frame("pair")
    if pairs.empty:
        return pairs
    return pairs[pairs["distance"] < log.d_min - tolerance]
