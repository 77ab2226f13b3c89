"""
Nonlinear MPC for one robot (with frozen neighbor duals) and for the whole
team at once (centralized baseline).

Both build the same single-shooting program: decision vector = stacked input
sequences followed by non-negative slacks on the collision rows, solved with
SLSQP. Collision rows are soft with a large linear penalty; a solve only
counts as collision-feasible when every slack stays under SLACK_TOL.
"""
import logging
import math
import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.optimize import minimize

from ca_solver import DualPairTrajectory, solve_ca_pair
from dual_distance import DualStatus, solve_dual_distance, support_multiplier
from dynamics import rollout, rollout_with_sensitivities
from geometry import DistNmpcError, enumerate_vertices, rotation_matrix

logger = logging.getLogger(__name__)

SLACK_TOL = 1e-4
SLACK_WEIGHT = 1e4
# SLSQP stopping tolerance on the merit function
SOLVER_FTOL = 1e-9
ALIGNMENT_TOL = 1e-4
# Penalty continuation for the alignment rows in FIXED coupling mode
ALIGNMENT_START_WEIGHT = 10.0
ALIGNMENT_MAX_WEIGHT = 1e6
ALIGNMENT_MAX_ROUNDS = 50


class NmpcStatus(str, Enum):
    CONVERGED = "converged"
    MAX_ITER = "max_iter"
    INFEASIBLE = "infeasible"


class CouplingMode(str, Enum):
    # Neighbor's separating direction and dual term frozen; ego footprint stays on its side
    SUPPORT = "support"
    # Ego multipliers frozen as well; alignment with s enforced by a growing penalty
    FIXED = "fixed"


@dataclass(frozen=True)
class CostWeights:
    Q_z: np.ndarray
    Q_u: np.ndarray
    Q_du: np.ndarray

    def __post_init__(self):
        for name in ("Q_z", "Q_u", "Q_du"):
            Q = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
            if not np.allclose(Q, Q.T):
                raise DistNmpcError(f"{name} must be symmetric")
            object.__setattr__(self, name, Q)
        if np.min(np.linalg.eigvalsh(self.Q_z)) < -1e-12 or np.min(np.linalg.eigvalsh(self.Q_du)) < -1e-12:
            raise DistNmpcError("Q_z and Q_du must be positive semidefinite")
        if np.min(np.linalg.eigvalsh(self.Q_u)) <= 0.0:
            raise DistNmpcError("Q_u must be positive definite")

    @classmethod
    def diagonal(cls, q_z, q_u, q_du):
        return cls(np.diag(q_z), np.diag(q_u), np.diag(q_du))

    def stage_cost(self, error, u, du):
        return float(error @ self.Q_z @ error + u @ self.Q_u @ u + du @ self.Q_du @ du)


def stage_cost(z, u, du, ref, weights):
    """||z - z_ref||^2_Qz + ||u||^2_Qu + ||du||^2_Qdu"""
    z, ref = np.asarray(z, dtype=float), np.asarray(ref, dtype=float)
    if z.shape != ref.shape:
        raise DistNmpcError(f"State has shape {z.shape} but the reference has {ref.shape}")
    return weights.stage_cost(z - ref, np.asarray(u, dtype=float), np.asarray(du, dtype=float))


def shift_and_augment(values, steps=1):
    """Drop the first `steps` rows and repeat the last row to keep the length"""
    values = np.asarray(values)
    if steps <= 0:
        return values.copy()
    index = np.minimum(np.arange(len(values)) + steps, len(values) - 1)
    return values[index]


@dataclass(frozen=True)
class ReferenceSignal:
    """Either a constant goal state or a time-indexed trajectory (one row per step)"""
    goal: np.ndarray = None
    trajectory: np.ndarray = None

    def __post_init__(self):
        if (self.goal is None) == (self.trajectory is None):
            raise DistNmpcError("A reference needs exactly one of goal or trajectory")
        if self.goal is not None:
            object.__setattr__(self, "goal", np.asarray(self.goal, dtype=float))
        else:
            object.__setattr__(self, "trajectory", np.atleast_2d(np.asarray(self.trajectory, dtype=float)))

    @classmethod
    def from_waypoints(cls, times, states, dt, steps):
        """Linear interpolation of (time, state) waypoints onto the step grid t*dt"""
        times = np.asarray(times, dtype=float)
        states = np.atleast_2d(np.asarray(states, dtype=float))
        grid = dt * np.arange(steps + 1)
        columns = [np.interp(grid, times, states[:, c]) for c in range(states.shape[1])]
        return cls(trajectory=np.column_stack(columns))

    def window(self, t, horizon):
        """Reference rows for steps t..t+N"""
        if self.goal is not None:
            return np.tile(self.goal, (horizon + 1, 1))
        index = np.clip(t + np.arange(horizon + 1), 0, len(self.trajectory) - 1)
        return self.trajectory[index]


@dataclass
class NeighborCoupling:
    """
    Frozen collision data for one neighbor (or static obstacle) over steps k=1..N.
    Oriented from the ego side: A_ego^T lambda_ego + s = 0.
    """
    neighbor_id: object
    polytopes: list
    lambda_ego: np.ndarray
    lambda_other: np.ndarray
    s: np.ndarray
    static: bool = False

    def other_terms(self):
        """-b_j^T lambda_ji for every step"""
        return np.array([-P.b @ lam for P, lam in zip(self.polytopes, self.lambda_other)])


@dataclass
class ErrorBoundHook:
    """Optional terms bounding how far the new first-step footprint moves from the old one"""
    previous_b: np.ndarray
    alpha_min: float
    constrain: bool = True
    ratio_weight: float = 0.0


@dataclass
class LocalNmpcProblem:
    model: object
    initial_state: np.ndarray
    horizon: int
    dt: float
    weights: CostWeights
    reference: np.ndarray
    bounds: object
    previous_input: np.ndarray
    couplings: list = field(default_factory=list)
    d_min: float = 0.0
    coupling_mode: CouplingMode = CouplingMode.SUPPORT
    error_hook: ErrorBoundHook = None
    warm_start: np.ndarray = None
    max_iterations: int = 100
    slack_weight: float = SLACK_WEIGHT
    tolerance: float = SOLVER_FTOL


@dataclass
class NmpcSolution:
    inputs: np.ndarray
    states: np.ndarray
    objective: float
    status: NmpcStatus
    solve_time: float
    max_slack: float = 0.0
    ego_multipliers: dict = field(default_factory=dict)
    iterations: int = 0
    message: str = ""

    @property
    def usable(self):
        return self.status != NmpcStatus.INFEASIBLE


@dataclass
class CentralizedProblem:
    problems: dict
    pairs: list
    d_min: float
    obstacles: list = field(default_factory=list)
    max_iterations: int = 200
    slack_weight: float = SLACK_WEIGHT
    tolerance: float = SOLVER_FTOL


@dataclass
class CentralizedSolution:
    solutions: dict
    duals: dict
    solve_time: float
    status: NmpcStatus


def _rotation_derivative(psi):
    c, s = math.cos(psi), math.sin(psi)
    return np.array([[-s, -c], [c, -s]])


class _RobotBlock:
    """One robot's input sequence inside the stacked decision vector"""

    def __init__(self, problem, offset):
        self.model = problem.model
        self.z0 = np.asarray(problem.initial_state, dtype=float)
        self.N = problem.horizon
        self.m = problem.model.input_dim
        self.dt = problem.dt
        self.weights = problem.weights
        self.reference = np.asarray(problem.reference, dtype=float)
        self.bounds = problem.bounds
        self.previous_input = np.asarray(problem.previous_input, dtype=float)
        self.offset = offset
        self.size = self.N * self.m
        if self.reference.shape != (self.N + 1, self.model.state_dim):
            raise DistNmpcError(f"Reference window has shape {self.reference.shape}, "
                                f"expected {(self.N + 1, self.model.state_dim)}")

    def inputs(self, x):
        return x[self.offset:self.offset + self.size].reshape(self.N, self.m)

    def input_deltas(self, U):
        return np.diff(np.vstack([self.previous_input, U]), axis=0)

    def cost(self, U, states):
        W = self.weights
        E = states - self.reference
        D = self.input_deltas(U)
        return float(np.einsum("ki,ij,kj->", E, W.Q_z, E) + np.einsum("ki,ij,kj->", U, W.Q_u, U)
                     + np.einsum("ki,ij,kj->", D, W.Q_du, D))

    def cost_gradient(self, U, states, sens):
        W = self.weights
        E = states - self.reference
        D = self.input_deltas(U)
        grad = np.einsum("ti,tikl->kl", 2 * E @ W.Q_z, sens)
        grad += 2 * U @ W.Q_u
        dD = 2 * D @ W.Q_du
        grad += dD
        grad[:-1] -= dD[1:]
        return grad

    def state_gradient_to_inputs(self, dg_dz, sens_k):
        """(rows, nz) gradient at one state -> (rows, N*m) gradient in the inputs"""
        return np.einsum("rz,zkl->rkl", dg_dz, sens_k).reshape(len(dg_dz), self.size)

    def box_bounds(self):
        lower = np.tile(self.bounds.lower, self.N)
        upper = np.tile(self.bounds.upper, self.N)
        return list(zip(lower, upper))

    def rate_rows(self, n_vars):
        """C, d with C x + d >= 0 encoding |u_k - u_{k-1}| <= rate * dt"""
        rows, offsets = [], []
        limit = self.bounds.rate * self.dt
        for k in range(self.N):
            for l in range(self.m):
                idx = self.offset + k * self.m + l
                for sign in (-1.0, 1.0):
                    row = np.zeros(n_vars)
                    row[idx] = sign
                    if k > 0:
                        row[idx - self.m] = -sign
                        offsets.append(limit[l])
                    else:
                        offsets.append(limit[l] - sign * self.previous_input[l])
                    rows.append(row)
        return np.array(rows), np.array(offsets)


class _SoftRows:
    """Constraint rows g(x) + slack >= 0; subclasses fill `evaluate`"""
    slack_index = np.zeros(0, dtype=int)

    @property
    def n_slack(self):
        return len(np.unique(self.slack_index)) if len(self.slack_index) else 0

    def evaluate(self, x, rollouts):
        raise NotImplementedError


class _SupportRows(_SoftRows):
    """Every ego vertex stays on the far side of the frozen supporting hyperplane"""

    def __init__(self, block, block_index, coupling, d_min, slack_start):
        self.block, self.block_index = block, block_index
        self.coupling = coupling
        self.d_min = d_min
        self.vertices = enumerate_vertices(block.model.shape)
        self.steps = list(range(block.N))
        self.other = coupling.other_terms()
        nv = len(self.vertices)
        self.slack_index = np.repeat(slack_start + np.arange(len(self.steps)), nv)

    def evaluate(self, x, rollouts):
        states, sens = rollouts[self.block_index]
        block, nv = self.block, len(self.vertices)
        g = np.zeros(len(self.slack_index))
        jac = np.zeros((len(self.slack_index), len(x)))
        for row, k in enumerate(self.steps):
            z = states[k + 1]
            s = self.coupling.s[k]
            R, dR = rotation_matrix(z[2]), _rotation_derivative(z[2])
            world = self.vertices @ R.T + z[:2]
            rows = slice(row * nv, (row + 1) * nv)
            g[rows] = world @ s + self.other[k] - self.d_min
            dg_dz = np.zeros((nv, block.model.state_dim))
            dg_dz[:, 0] = s[0]
            dg_dz[:, 1] = s[1]
            dg_dz[:, 2] = (self.vertices @ dR.T) @ s
            jac[rows, block.offset:block.offset + block.size] = \
                block.state_gradient_to_inputs(dg_dz, sens[k + 1])
        return g, jac

    def ego_multipliers(self, states):
        lam = np.zeros((self.block.N, self.block.model.shape.m))
        for k in self.steps:
            lam[k], _ = support_multiplier(self.block.model.polytope(states[k + 1]), self.coupling.s[k])
        return lam


class _FixedRows(_SoftRows):
    """Distance row with frozen ego multipliers, plus a penalty aligning A_i(z)^T lambda with -s"""

    def __init__(self, block, block_index, coupling, d_min, slack_start):
        self.block, self.block_index = block, block_index
        self.coupling = coupling
        self.d_min = d_min
        self.steps = list(range(block.N))
        self.other = coupling.other_terms()
        shape = block.model.shape
        self.mu = coupling.lambda_ego @ shape.A
        self.base = coupling.lambda_ego @ shape.b
        self.slack_index = slack_start + np.arange(len(self.steps))
        self.penalty_weight = ALIGNMENT_START_WEIGHT

    def evaluate(self, x, rollouts):
        states, sens = rollouts[self.block_index]
        block = self.block
        g = np.zeros(len(self.steps))
        jac = np.zeros((len(self.steps), len(x)))
        for row, k in enumerate(self.steps):
            z = states[k + 1]
            R, dR = rotation_matrix(z[2]), _rotation_derivative(z[2])
            turned = R @ self.mu[k]
            g[row] = -self.base[k] - turned @ z[:2] + self.other[k] - self.d_min
            dg_dz = np.zeros((1, block.model.state_dim))
            dg_dz[0, :2] = -turned
            dg_dz[0, 2] = -(dR @ self.mu[k]) @ z[:2]
            jac[row, block.offset:block.offset + block.size] = \
                block.state_gradient_to_inputs(dg_dz, sens[k + 1])[0]
        return g, jac

    def alignment(self, states):
        return [rotation_matrix(states[k + 1][2]) @ self.mu[k] + self.coupling.s[k] for k in self.steps]

    def residual(self, states):
        residuals = self.alignment(states)
        return max((float(np.max(np.abs(r))) for r in residuals), default=0.0)

    def penalty(self, x, rollouts):
        states, sens = rollouts[self.block_index]
        block = self.block
        value = 0.0
        grad = np.zeros(len(x))
        for k, r in zip(self.steps, self.alignment(states)):
            value += self.penalty_weight * float(r @ r)
            dr_dpsi = _rotation_derivative(states[k + 1][2]) @ self.mu[k]
            dg_dz = np.zeros((1, block.model.state_dim))
            dg_dz[0, 2] = 2 * self.penalty_weight * float(r @ dr_dpsi)
            grad[block.offset:block.offset + block.size] += \
                block.state_gradient_to_inputs(dg_dz, sens[k + 1])[0]
        return value, grad

    def ego_multipliers(self, states):
        return np.array(self.coupling.lambda_ego, dtype=float)


class _FootprintShift:
    """b_i(z_1) and its state gradient for the error-bound hook"""

    def __init__(self, block, block_index, hook):
        self.block, self.block_index, self.hook = block, block_index, hook
        self.shape = block.model.shape

    def delta(self, states, sens):
        z = states[1]
        R, dR = rotation_matrix(z[2]), _rotation_derivative(z[2])
        A_world = self.shape.A @ R.T
        delta = self.shape.b + A_world @ z[:2] - self.hook.previous_b
        db_dz = np.zeros((self.shape.m, self.block.model.state_dim))
        db_dz[:, :2] = A_world
        db_dz[:, 2] = self.shape.A @ dR.T @ z[:2]
        return delta, self.block.state_gradient_to_inputs(db_dz, sens[1])


class _AlphaRows(_SoftRows):
    def __init__(self, block, block_index, hook, slack_start):
        self.shift = _FootprintShift(block, block_index, hook)
        self.block, self.block_index, self.hook = block, block_index, hook
        self.slack_index = np.array([slack_start])

    def evaluate(self, x, rollouts):
        states, sens = rollouts[self.block_index]
        delta, ddelta = self.shift.delta(states, sens)
        jac = np.zeros((1, len(x)))
        jac[0, self.block.offset:self.block.offset + self.block.size] = -2 * delta @ ddelta
        return np.array([self.hook.alpha_min ** 2 - float(delta @ delta)]), jac


class _RatioPenalty:
    def __init__(self, block, block_index, hook):
        self.shift = _FootprintShift(block, block_index, hook)
        self.block, self.block_index, self.hook = block, block_index, hook

    def penalty(self, x, rollouts):
        states, sens = rollouts[self.block_index]
        delta, ddelta = self.shift.delta(states, sens)
        scale = self.hook.ratio_weight / self.hook.alpha_min ** 2
        grad = np.zeros(len(x))
        grad[self.block.offset:self.block.offset + self.block.size] = 2 * scale * delta @ ddelta
        return scale * float(delta @ delta), grad


class _PairDistanceRows(_SoftRows):
    """dist(P_i(z_i,k), P_j(z_j,k)) - d_min + slack >= 0 with envelope gradients"""

    def __init__(self, blocks, block_indices, d_min, slack_start, obstacle=None):
        self.blocks, self.block_indices = blocks, block_indices
        self.obstacle = obstacle
        self.d_min = d_min
        self.N = blocks[0].N
        self.slack_index = slack_start + np.arange(self.N)
        self.obstacle_center = enumerate_vertices(obstacle).mean(axis=0) if obstacle is not None else None
        self.warm = {}

    def _distance(self, k, P_i, P_j):
        solution = solve_dual_distance(P_i, P_j, warm=self.warm.get(k))
        self.warm[k] = solution
        return solution

    def evaluate(self, x, rollouts):
        g = np.zeros(self.N)
        jac = np.zeros((self.N, len(x)))
        J = np.array([[0.0, -1.0], [1.0, 0.0]])
        block_i = self.blocks[0]
        states_i, sens_i = rollouts[self.block_indices[0]]
        two_sided = self.obstacle is None
        if two_sided:
            block_j = self.blocks[1]
            states_j, sens_j = rollouts[self.block_indices[1]]
        for k in range(self.N):
            z_i = states_i[k + 1]
            P_i = block_i.model.polytope(z_i)
            if two_sided:
                z_j = states_j[k + 1]
                P_j = block_j.model.polytope(z_j)
                center_j = z_j[:2]
            else:
                P_j = self.obstacle
                center_j = self.obstacle_center
            solution = self._distance(k, P_i, P_j)
            g[k] = solution.distance - self.d_min

            if solution.status == DualStatus.OPTIMAL:
                s = solution.s
                turn_i = s @ J @ (solution.point_1 - z_i[:2])
                turn_j = -s @ J @ (solution.point_2 - center_j)
            else:
                # Overlap: push the centers apart
                gap = z_i[:2] - center_j
                s = gap / max(np.linalg.norm(gap), 1e-9)
                turn_i = turn_j = 0.0

            dg_dz = np.zeros((1, block_i.model.state_dim))
            dg_dz[0, :2] = s
            dg_dz[0, 2] = turn_i
            jac[k, block_i.offset:block_i.offset + block_i.size] += \
                block_i.state_gradient_to_inputs(dg_dz, sens_i[k + 1])[0]
            if two_sided:
                dg_dz = np.zeros((1, block_j.model.state_dim))
                dg_dz[0, :2] = -s
                dg_dz[0, 2] = turn_j
                jac[k, block_j.offset:block_j.offset + block_j.size] += \
                    block_j.state_gradient_to_inputs(dg_dz, sens_j[k + 1])[0]
        return g, jac


class _Program:
    """Stacked single-shooting program shared by local and centralized solves"""

    def __init__(self, blocks, slack_weight):
        self.blocks = blocks
        self.slack_offset = sum(block.size for block in blocks)
        self.n_slack = 0
        self.rows = []
        self.penalties = []
        self.slack_weight = slack_weight
        self._rollout_key = None
        self._rows_key = None

    def next_slack(self):
        return self.slack_offset + self.n_slack

    def add_rows(self, rows):
        if len(rows.slack_index) == 0:
            return rows
        self.rows.append(rows)
        self.n_slack += rows.n_slack
        return rows

    @property
    def n_vars(self):
        return self.slack_offset + self.n_slack

    def rollouts(self, x):
        key = x.tobytes()
        if key != self._rollout_key:
            self._rollouts = [rollout_with_sensitivities(b.model, b.z0, b.inputs(x), b.dt)
                              for b in self.blocks]
            self._rollout_key = key
        return self._rollouts

    def tracking_cost(self, x):
        rollouts = self.rollouts(x)
        return sum(b.cost(b.inputs(x), states) for b, (states, _) in zip(self.blocks, rollouts))

    def merit(self, x):
        rollouts = self.rollouts(x)
        value = self.tracking_cost(x) + self.slack_weight * float(np.sum(x[self.slack_offset:]))
        for term in self.penalties:
            value += term.penalty(x, rollouts)[0]
        return value

    def merit_gradient(self, x):
        rollouts = self.rollouts(x)
        grad = np.zeros(len(x))
        for block, (states, sens) in zip(self.blocks, rollouts):
            grad[block.offset:block.offset + block.size] = \
                block.cost_gradient(block.inputs(x), states, sens).reshape(-1)
        grad[self.slack_offset:] = self.slack_weight
        for term in self.penalties:
            grad += term.penalty(x, rollouts)[1]
        return grad

    def _soft_rows(self, x):
        key = x.tobytes()
        if key != self._rows_key:
            rollouts = self.rollouts(x)
            values, jacobians = [], []
            for rows in self.rows:
                g, jac = rows.evaluate(x, rollouts)
                g = g + x[rows.slack_index]
                jac = jac.copy()
                jac[np.arange(len(rows.slack_index)), rows.slack_index] += 1.0
                values.append(g)
                jacobians.append(jac)
            self._rows_value = np.concatenate(values)
            self._rows_jacobian = np.vstack(jacobians)
            self._rows_key = key
        return self._rows_value, self._rows_jacobian

    def required_slack(self, x):
        """Smallest slacks making every soft row hold at the inputs in x"""
        trial = x.copy()
        trial[self.slack_offset:] = 0.0
        rollouts = self.rollouts(trial)
        slack = np.zeros(self.n_slack)
        for rows in self.rows:
            g, _ = rows.evaluate(trial, rollouts)
            np.maximum.at(slack, rows.slack_index - self.slack_offset, -g)
        return np.maximum(slack, 0.0)

    def bounds(self):
        bounds = []
        for block in self.blocks:
            bounds.extend(block.box_bounds())
        bounds.extend([(0.0, None)] * self.n_slack)
        return bounds

    def constraints(self):
        C = []
        d = []
        for block in self.blocks:
            C_block, d_block = block.rate_rows(self.n_vars)
            C.append(C_block)
            d.append(d_block)
        C, d = np.vstack(C), np.concatenate(d)
        constraints = [{"type": "ineq", "fun": lambda x: C @ x + d, "jac": lambda x: C}]
        if self.rows:
            constraints.append({"type": "ineq",
                                "fun": lambda x: self._soft_rows(x)[0],
                                "jac": lambda x: self._soft_rows(x)[1]})
        return constraints

    def start_point(self, inputs):
        x = np.zeros(self.n_vars)
        for block, U in zip(self.blocks, inputs):
            x[block.offset:block.offset + block.size] = U.reshape(-1)
        if self.n_slack:
            x[self.slack_offset:] = self.required_slack(x)
        return x

    def solve(self, x0, max_iterations, tolerance=SOLVER_FTOL):
        result = minimize(self.merit, x0, jac=self.merit_gradient, method="SLSQP",
                          bounds=self.bounds(), constraints=self.constraints(),
                          options={"maxiter": max_iterations, "ftol": tolerance})
        return result


def _start_inputs(problem):
    """Warm start if given, else hold the last applied input; projected onto the input limits"""
    N, m = problem.horizon, problem.model.input_dim
    if problem.warm_start is not None and np.shape(problem.warm_start) == (N, m):
        guess = np.asarray(problem.warm_start, dtype=float)
    else:
        guess = np.tile(np.asarray(problem.previous_input, dtype=float), (N, 1))
    return problem.bounds.project(guess, problem.previous_input, problem.dt)


def _finish(program, result, fallback_x, max_iterations):
    """Pick the better of the SLSQP result and the start point, then project it"""
    x = np.asarray(result.x, dtype=float)
    if fallback_x is not None and program.merit(fallback_x) <= program.merit(x):
        x = fallback_x
    for block in program.blocks:
        U = block.bounds.project(block.inputs(x), block.previous_input, block.dt)
        x[block.offset:block.offset + block.size] = U.reshape(-1)
    if program.n_slack:
        x[program.slack_offset:] = program.required_slack(x)
    max_slack = float(np.max(x[program.slack_offset:], initial=0.0))
    if max_slack > SLACK_TOL:
        status = NmpcStatus.INFEASIBLE
    elif result.status == 9 or result.nit >= max_iterations:
        status = NmpcStatus.MAX_ITER
    else:
        status = NmpcStatus.CONVERGED
    return x, max_slack, status


def solve_local_nmpc(problem):
    """
    Solve one robot's NMPC with neighbor duals and predictions held fixed.
    Never raises on infeasibility; the status says what happened.
    """
    start = time.perf_counter()
    block = _RobotBlock(problem, offset=0)
    program = _Program([block], problem.slack_weight)

    coupling_rows = []
    for coupling in problem.couplings:
        if problem.coupling_mode == CouplingMode.FIXED and not coupling.static:
            rows = _FixedRows(block, 0, coupling, problem.d_min, program.next_slack())
            program.penalties.append(rows)
        else:
            rows = _SupportRows(block, 0, coupling, problem.d_min, program.next_slack())
        coupling_rows.append(program.add_rows(rows))

    hook = problem.error_hook
    if hook is not None and hook.alpha_min > 0:
        if hook.constrain:
            program.add_rows(_AlphaRows(block, 0, hook, program.next_slack()))
        if hook.ratio_weight > 0:
            program.penalties.append(_RatioPenalty(block, 0, hook))

    x0 = program.start_point([_start_inputs(problem)])
    fixed_rows = [rows for rows in coupling_rows if isinstance(rows, _FixedRows)]
    rounds = ALIGNMENT_MAX_ROUNDS if fixed_rows else 1
    iterations = 0
    for round_index in range(rounds):
        result = program.solve(x0, problem.max_iterations, problem.tolerance)
        iterations += int(result.nit)
        x, max_slack, status = _finish(program, result, x0, problem.max_iterations)
        if not fixed_rows:
            break
        states = rollout(block.model, block.z0, block.inputs(x), block.dt)
        residual = max(rows.residual(states) for rows in fixed_rows)
        if residual <= ALIGNMENT_TOL:
            break
        weight = fixed_rows[0].penalty_weight
        if weight >= ALIGNMENT_MAX_WEIGHT:
            logger.warning(f"Alignment residual {residual:.2e} left after {round_index + 1} rounds")
            status = NmpcStatus.INFEASIBLE
            break
        for rows in fixed_rows:
            rows.penalty_weight = min(2 * weight, ALIGNMENT_MAX_WEIGHT)
        x0 = x

    U = block.inputs(x).copy()
    states = rollout(block.model, block.z0, U, block.dt)
    multipliers = {rows.coupling.neighbor_id: rows.ego_multipliers(states) for rows in coupling_rows}
    return NmpcSolution(
        inputs=U,
        states=states,
        objective=block.cost(U, states),
        status=status,
        solve_time=time.perf_counter() - start,
        max_slack=max_slack,
        ego_multipliers=multipliers,
        iterations=iterations,
        message=str(result.message),
    )


def solve_centralized_nmpc(problem):
    """
    Joint NMPC over every robot with the pairwise distance written directly
    as a constraint (duals eliminated). Duals are recovered afterwards.
    """
    start = time.perf_counter()
    ids = sorted(problem.problems)
    blocks, offset = [], 0
    for robot_id in ids:
        block = _RobotBlock(problem.problems[robot_id], offset)
        blocks.append(block)
        offset += block.size
    index_of = {robot_id: k for k, robot_id in enumerate(ids)}
    program = _Program(blocks, problem.slack_weight)

    for i, j in problem.pairs:
        a, b = index_of[i], index_of[j]
        program.add_rows(_PairDistanceRows([blocks[a], blocks[b]], [a, b], problem.d_min,
                                           program.next_slack()))
    for robot_id in ids:
        a = index_of[robot_id]
        for obstacle in problem.obstacles:
            program.add_rows(_PairDistanceRows([blocks[a]], [a], problem.d_min, program.next_slack(),
                                               obstacle=obstacle))

    x0 = program.start_point([_start_inputs(problem.problems[robot_id]) for robot_id in ids])
    result = program.solve(x0, problem.max_iterations, problem.tolerance)
    x, max_slack, status = _finish(program, result, x0, problem.max_iterations)
    solve_time = time.perf_counter() - start

    solutions, predictions = {}, {}
    for robot_id, block in zip(ids, blocks):
        U = block.inputs(x).copy()
        states = rollout(block.model, block.z0, U, block.dt)
        predictions[robot_id] = [block.model.polytope(z) for z in states[1:]]
        solutions[robot_id] = NmpcSolution(U, states, block.cost(U, states), status, solve_time,
                                           max_slack=max_slack, iterations=int(result.nit),
                                           message=str(result.message))

    duals = {}
    for i, j in problem.pairs:
        duals[(i, j)] = solve_ca_pair(predictions[i], predictions[j], problem.d_min, pair=(i, j))
        solutions[i].ego_multipliers[j] = duals[(i, j)].lambda_ij
        solutions[j].ego_multipliers[i] = duals[(i, j)].lambda_ji
    return CentralizedSolution(solutions, duals, solve_time, status)


def fallback_solution(model, state, previous, dt, reason="", bounds=None, previous_input=None):
    """Shift the previous plan by one step and append a zero input"""
    inputs = np.vstack([previous.inputs[1:], np.zeros((1, previous.inputs.shape[1]))])
    if bounds is not None and previous_input is not None:
        inputs = bounds.project(inputs, previous_input, dt)
    states = rollout(model, state, inputs, dt)
    return NmpcSolution(inputs, states, float("nan"), NmpcStatus.INFEASIBLE, 0.0,
                        max_slack=previous.max_slack, message=reason or "fallback")
