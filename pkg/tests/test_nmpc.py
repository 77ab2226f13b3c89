from dataclasses import replace

import numpy as np
import pytest

from ca_solver import solve_ca_pair
from dynamics import BicycleModel, InputBounds, UnicycleModel, rollout
from error_bound import footprint_vector
from geometry import DistNmpcError, box_polytope, enumerate_vertices, oracle_distance, rotation_matrix
from nmpc import (
    CentralizedProblem,
    CostWeights,
    CouplingMode,
    ErrorBoundHook,
    LocalNmpcProblem,
    NeighborCoupling,
    NmpcStatus,
    ReferenceSignal,
    fallback_solution,
    shift_and_augment,
    solve_centralized_nmpc,
    solve_local_nmpc,
    stage_cost,
)

N = 10
DT = 0.05
FAST_RATES = InputBounds(lower=[-4.0, -2.0], upper=[4.0, 2.0], rate=[100.0, 100.0])


def unicycle_weights():
    return CostWeights.diagonal([1.0, 1.0, 0.0], [0.05, 0.05], [0.1, 0.1])


def unicycle_problem(z0, goal, previous=(0.0, 0.0), bounds=FAST_RATES, **kwargs):
    model = kwargs.pop("model", UnicycleModel(box_polytope(1.0, 1.0)))
    return LocalNmpcProblem(
        model=model,
        initial_state=np.asarray(z0, dtype=float),
        horizon=N,
        dt=DT,
        weights=unicycle_weights(),
        reference=ReferenceSignal(goal=goal).window(0, N),
        bounds=bounds,
        previous_input=np.asarray(previous, dtype=float),
        **kwargs,
    )


def neighbor_coupling(ego_model, ego_state, other_polytope, d_min, neighbor_id=1):
    """Duals from a CA solve against a neighbor that stays put"""
    ego = [ego_model.polytope(ego_state)] * N
    other = [other_polytope] * N
    duals = solve_ca_pair(ego, other, d_min, pair=(0, neighbor_id))
    lam_ego, lam_other, s = duals.for_robot(0)
    return NeighborCoupling(neighbor_id, other, lam_ego, lam_other, s)


def support_margin(model, states, coupling, d_min):
    """min over steps and ego vertices of s.v - b_j^T lambda_ji - d_min"""
    vertices = enumerate_vertices(model.shape)
    margins = []
    for k in range(N):
        z = states[k + 1]
        world = vertices @ rotation_matrix(z[2]).T + z[:2]
        margins.append(np.min(world @ coupling.s[k]) - coupling.polytopes[k].b @ coupling.lambda_other[k] - d_min)
    return min(margins)


def test_stage_cost_examples(rng):
    weights = CostWeights.diagonal([1.0, 1.0, 1.0], [1.0, 1.0], [1.0, 1.0])
    z_ref = np.array([1.0, 2.0, 0.3])
    assert stage_cost(z_ref, np.zeros(2), np.zeros(2), z_ref, weights) == 0.0
    assert stage_cost(z_ref + [1.0, 0.0, 0.0], np.zeros(2), np.zeros(2), z_ref, weights) == pytest.approx(1.0)

    Q_z = np.diag(rng.uniform(0.0, 3.0, 3))
    Q_u = np.diag(rng.uniform(0.1, 3.0, 2))
    Q_du = np.diag(rng.uniform(0.1, 3.0, 2))
    z, ref, u, du = rng.normal(size=3), rng.normal(size=3), rng.normal(size=2), rng.normal(size=2)
    expected = (z - ref) @ Q_z @ (z - ref) + u @ Q_u @ u + du @ Q_du @ du
    assert stage_cost(z, u, du, ref, CostWeights(Q_z, Q_u, Q_du)) == pytest.approx(expected, rel=1e-12)


def test_stage_cost_dimension_mismatch():
    with pytest.raises(DistNmpcError):
        stage_cost(np.zeros(3), np.zeros(2), np.zeros(2), np.zeros(4), unicycle_weights())


def test_cost_weights_validation():
    with pytest.raises(DistNmpcError):
        CostWeights.diagonal([1.0, -1.0], [1.0], [1.0])
    with pytest.raises(DistNmpcError):
        CostWeights.diagonal([1.0], [0.0], [1.0])
    with pytest.raises(DistNmpcError):
        CostWeights(np.array([[1.0, 2.0], [0.0, 1.0]]), np.eye(1), np.eye(1))


def test_shift_and_augment():
    np.testing.assert_array_equal(shift_and_augment(np.array([1, 2, 3])), [2, 3, 3])
    np.testing.assert_array_equal(shift_and_augment(np.array([4, 4, 4])), [4, 4, 4])
    values = np.array([1, 2, 3, 4])
    np.testing.assert_array_equal(shift_and_augment(shift_and_augment(values)), shift_and_augment(values, 2))
    np.testing.assert_array_equal(shift_and_augment(values, 2), [3, 4, 4, 4])


def test_reference_signal():
    with pytest.raises(DistNmpcError):
        ReferenceSignal()
    window = ReferenceSignal(goal=[1.0, 2.0, 0.0]).window(5, 3)
    assert window.shape == (4, 3)
    reference = ReferenceSignal.from_waypoints([0.0, 1.0], [[0.0, 0.0], [10.0, 5.0]], 0.25, 8)
    np.testing.assert_allclose(reference.trajectory[:5, 0], [0.0, 2.5, 5.0, 7.5, 10.0])
    np.testing.assert_allclose(reference.window(7, 3)[:, 1], [5.0, 5.0, 5.0, 5.0])


def test_robot_at_goal_stays_put():
    solution = solve_local_nmpc(unicycle_problem([0.0, 0.0, 0.0], [0.0, 0.0, 0.0]))
    assert solution.status == NmpcStatus.CONVERGED
    assert solution.objective == pytest.approx(0.0, abs=1e-8)
    np.testing.assert_allclose(solution.inputs, 0.0, atol=1e-6)


def test_solution_replays_and_respects_limits():
    bounds = InputBounds(lower=[-4.0, -0.3], upper=[4.0, 0.3], rate=[1.0, 0.2])
    model = BicycleModel()
    problem = LocalNmpcProblem(
        model=model,
        initial_state=np.array([0.0, 1.85, 0.0, 10.0]),
        horizon=15,
        dt=DT,
        weights=CostWeights.diagonal([0.0, 0.5, 2.0, 1.0], [0.1, 5.0], [0.5, 20.0]),
        reference=ReferenceSignal(goal=[0.0, 1.85, 0.0, 15.0]).window(0, 15),
        bounds=bounds,
        previous_input=np.zeros(2),
    )
    solution = solve_local_nmpc(problem)
    assert solution.usable
    assert solution.inputs[0, 0] > 0.0
    np.testing.assert_allclose(solution.states, rollout(model, problem.initial_state, solution.inputs, DT),
                               atol=1e-9)
    assert np.all(solution.inputs >= bounds.lower - 1e-12)
    assert np.all(solution.inputs <= bounds.upper + 1e-12)
    steps = np.abs(np.diff(np.vstack([np.zeros(2), solution.inputs]), axis=0))
    assert np.all(steps <= bounds.rate * DT + 1e-9)


def test_warm_start_never_worse():
    problem = unicycle_problem([0.0, 0.0, 0.0], [3.0, 1.0, 0.0])
    cold = solve_local_nmpc(problem)
    problem.warm_start = cold.inputs
    warm = solve_local_nmpc(problem)
    assert warm.objective <= cold.objective + 1e-6


def test_far_neighbor_leaves_margin():
    model = UnicycleModel(box_polytope(1.0, 1.0))
    z0 = np.zeros(3)
    other = box_polytope(1.0, 1.0).translate([11.0, 0.0])
    coupling = neighbor_coupling(model, z0, other, 0.5)
    solution = solve_local_nmpc(unicycle_problem(z0, [0.0, 0.0, 0.0], couplings=[coupling], d_min=0.5, model=model))
    assert solution.status == NmpcStatus.CONVERGED
    np.testing.assert_allclose(solution.inputs, 0.0, atol=1e-6)
    assert support_margin(model, solution.states, coupling, 0.5) == pytest.approx(9.5, abs=1e-6)
    assert solution.ego_multipliers[1].shape == (N, 4)


def test_frozen_neighbor_blocks_the_path():
    model = UnicycleModel(box_polytope(1.0, 1.0))
    z0 = np.array([0.5, 0.0, 0.0])
    other = box_polytope(1.0, 1.0).translate([3.0, 0.0])
    d_min = 0.5
    coupling = neighbor_coupling(model, z0, other, d_min)
    problem = unicycle_problem(z0, [10.0, 0.0, 0.0], previous=(2.0, 0.0), couplings=[coupling],
                               d_min=d_min, model=model)
    solution = solve_local_nmpc(problem)
    assert solution.status != NmpcStatus.INFEASIBLE
    assert solution.max_slack <= 1e-4
    assert support_margin(model, solution.states, coupling, d_min) >= -1e-4
    for z in solution.states[1:]:
        assert oracle_distance(model.polytope(z), other) >= d_min - 1e-3


@pytest.mark.parametrize("mode", [CouplingMode.SUPPORT, CouplingMode.FIXED])
def test_overlapping_prediction_pushes_robot_away(mode):
    model = UnicycleModel(box_polytope(1.0, 1.0))
    z0 = np.zeros(3)
    other = box_polytope(1.0, 1.0).translate([0.6, 0.0])
    coupling = neighbor_coupling(model, z0, other, 0.1)
    np.testing.assert_allclose(coupling.s, np.tile([-1.0, 0.0], (N, 1)), atol=1e-12)
    problem = unicycle_problem(z0, [0.0, 0.0, 0.0], couplings=[coupling], d_min=0.1, model=model,
                               coupling_mode=mode)
    solution = solve_local_nmpc(problem)
    xs = solution.states[:, 0]
    assert np.all(np.diff(xs) <= 1e-4)
    assert xs[-1] <= -0.5 + 1e-3
    assert oracle_distance(model.polytope(solution.states[-1]), other) >= 0.1 - 1e-3


def test_fixed_coupling_mode_far_neighbor():
    model = UnicycleModel(box_polytope(1.0, 1.0))
    z0 = np.zeros(3)
    other = box_polytope(1.0, 1.0).translate([11.0, 0.0])
    coupling = neighbor_coupling(model, z0, other, 0.5)
    problem = unicycle_problem(z0, [0.0, 0.0, 0.0], couplings=[coupling], d_min=0.5, model=model,
                               coupling_mode=CouplingMode.FIXED)
    solution = solve_local_nmpc(problem)
    assert solution.status == NmpcStatus.CONVERGED
    np.testing.assert_allclose(solution.ego_multipliers[1], coupling.lambda_ego)


def test_fixed_multipliers_pin_the_heading():
    model = UnicycleModel(box_polytope(1.0, 1.0))
    z0 = np.zeros(3)
    other = box_polytope(1.0, 1.0).translate([11.0, 0.0])
    coupling = neighbor_coupling(model, z0, other, 0.5)
    goal = [0.0, 2.0, 0.0]

    fixed = solve_local_nmpc(unicycle_problem(z0, goal, couplings=[coupling], d_min=0.5, model=model,
                                              coupling_mode=CouplingMode.FIXED))
    assert fixed.status != NmpcStatus.INFEASIBLE
    # A frozen facet multiplier only aligns with s at the heading it was computed for
    assert np.max(np.abs(fixed.states[:, 2])) <= 1e-3
    assert abs(fixed.states[-1, 1]) <= 1e-3

    support = solve_local_nmpc(unicycle_problem(z0, goal, couplings=[coupling], d_min=0.5, model=model,
                                                coupling_mode=CouplingMode.SUPPORT))
    assert support.status == NmpcStatus.CONVERGED
    assert np.max(np.abs(support.states[:, 2])) > 0.1
    assert support.states[-1, 1] > 0.05


def test_alpha_hook_limits_first_step_motion():
    model = UnicycleModel(box_polytope(1.0, 1.0))
    z0 = np.zeros(3)
    previous_b = footprint_vector(model.shape.A, model.shape.b, z0)
    free = solve_local_nmpc(unicycle_problem(z0, [20.0, 0.0, 0.0], previous=(4.0, 0.0), model=model))
    hooked = solve_local_nmpc(unicycle_problem(z0, [20.0, 0.0, 0.0], previous=(4.0, 0.0), model=model,
                                               error_hook=ErrorBoundHook(previous_b, alpha_min=0.05)))

    def moved(solution):
        return np.linalg.norm(footprint_vector(model.shape.A, model.shape.b, solution.states[1]) - previous_b)

    assert moved(free) > 0.1
    assert moved(hooked) <= 0.05 + 2e-3


def test_centralized_single_robot_matches_local():
    problem = unicycle_problem([0.0, 0.0, 0.0], [2.0, 1.0, 0.0])
    local = solve_local_nmpc(problem)
    central = solve_centralized_nmpc(CentralizedProblem({0: problem}, [], 0.5, max_iterations=problem.max_iterations))
    np.testing.assert_allclose(central.solutions[0].inputs, local.inputs, atol=1e-6)
    assert central.duals == {}


def test_centralized_pair_keeps_distance():
    d_min = 0.3
    problems = {
        0: unicycle_problem([-2.0, 0.2, 0.0], [4.0, 0.2, 0.0], previous=(2.0, 0.0)),
        1: unicycle_problem([2.0, -0.2, np.pi], [-4.0, -0.2, np.pi], previous=(2.0, 0.0)),
    }
    result = solve_centralized_nmpc(CentralizedProblem(problems, [(0, 1)], d_min))
    assert result.status != NmpcStatus.INFEASIBLE
    states_0, states_1 = result.solutions[0].states, result.solutions[1].states
    model_0, model_1 = problems[0].model, problems[1].model
    for z0, z1 in zip(states_0[1:], states_1[1:]):
        assert oracle_distance(model_0.polytope(z0), model_1.polytope(z1)) >= d_min - 1e-3
    assert result.duals[(0, 1)].horizon == N
    assert result.solutions[0].ego_multipliers[1].shape == (N, 4)


def test_fallback_solution_shifts_previous_plan():
    model = UnicycleModel()
    previous = solve_local_nmpc(unicycle_problem([0.0, 0.0, 0.0], [2.0, 0.0, 0.0]))
    state = previous.states[1]
    fallback = fallback_solution(model, state, previous, DT, "test")
    np.testing.assert_allclose(fallback.inputs[:-1], previous.inputs[1:])
    np.testing.assert_allclose(fallback.inputs[-1], 0.0)
    np.testing.assert_allclose(fallback.states, rollout(model, state, fallback.inputs, DT))
    assert fallback.status == NmpcStatus.INFEASIBLE
    assert not fallback.usable
    assert fallback.message == "test"


@pytest.mark.parametrize("mode", [CouplingMode.SUPPORT, CouplingMode.FIXED])
def test_duals_from_centralized_optimum_reproduce_its_plans(mode):
    d_min = 0.3
    problems = {
        0: unicycle_problem([-2.0, 0.2, 0.0], [4.0, 0.2, 0.0], previous=(2.0, 0.0), max_iterations=500),
        1: unicycle_problem([2.0, -0.2, np.pi], [-4.0, -0.2, np.pi], previous=(2.0, 0.0), max_iterations=500),
    }
    central = solve_centralized_nmpc(CentralizedProblem(problems, [(0, 1)], d_min, max_iterations=500,
                                                        tolerance=1e-12))
    assert central.status != NmpcStatus.INFEASIBLE
    plans = {robot_id: solution.states for robot_id, solution in central.solutions.items()}
    gaps = [oracle_distance(problems[0].model.polytope(z0), problems[1].model.polytope(z1))
            for z0, z1 in zip(plans[0][1:], plans[1][1:])]
    # the pair constraint is active somewhere along the horizon
    assert min(gaps) <= d_min + 1e-3

    duals = central.duals[(0, 1)]
    for ego, other in ((0, 1), (1, 0)):
        lam_ego, lam_other, s = duals.for_robot(ego)
        predicted = [problems[other].model.polytope(z) for z in plans[other][1:]]
        local = solve_local_nmpc(replace(
            problems[ego],
            couplings=[NeighborCoupling(other, predicted, lam_ego, lam_other, s)],
            d_min=d_min,
            coupling_mode=mode,
            warm_start=central.solutions[ego].inputs,
            tolerance=1e-12,
        ))
        assert local.status != NmpcStatus.INFEASIBLE
        np.testing.assert_allclose(local.states, plans[ego], atol=1e-3)
