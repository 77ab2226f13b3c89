import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynamics import (
    BicycleInput,
    BicycleModel,
    BicycleState,
    InputBounds,
    UnicycleInput,
    UnicycleModel,
    UnicycleState,
    VehicleParams,
    bicycle_step,
    make_model,
    rollout,
    rollout_with_sensitivities,
    unicycle_step,
)
from geometry import DistNmpcError, enumerate_vertices, polygon_area, regular_polygon


def test_bicycle_straight_line():
    z = bicycle_step(BicycleState(0.0, 0.0, 0.0, 10.0), BicycleInput(0.0, 0.0), 0.05)
    np.testing.assert_allclose(z.to_array(), [0.5, 0.0, 0.0, 10.0], atol=1e-15)


def test_bicycle_pure_acceleration():
    z = bicycle_step(BicycleState(0.0, 0.0, 0.0, 10.0), BicycleInput(1.0, 0.0), 0.05)
    np.testing.assert_allclose(z.to_array(), [0.5, 0.0, 0.0, 10.05], atol=1e-12)


def test_bicycle_steering_matches_hand_evaluation():
    params = VehicleParams(l_f=1.25, l_r=1.25)
    z = bicycle_step(BicycleState(0.0, 0.0, 0.0, 10.0), BicycleInput(0.0, 0.1), 0.05, params)
    beta = math.atan(math.tan(0.1) * 1.25 / 2.5)
    expected = [0.05 * 10.0 * math.cos(beta), 0.05 * 10.0 * math.sin(beta),
                0.05 * 10.0 * math.cos(beta) * math.tan(0.1) / 2.5, 10.0]
    np.testing.assert_allclose(z.to_array(), expected, atol=1e-12)


def test_bicycle_speed_clamped_at_zero():
    z = bicycle_step(BicycleState(0.0, 0.0, 0.0, 0.1), BicycleInput(-4.0, 0.0), 0.05)
    assert z.v == 0.0


def test_bicycle_zero_steering_keeps_heading():
    model = BicycleModel()
    z = model.step(np.array([1.0, 2.0, 0.37, 12.0]), np.array([2.0, 0.0]), 0.05)
    assert z[2] == 0.37


def test_unicycle_examples():
    z = unicycle_step(UnicycleState(0.0, 0.0, 0.0), UnicycleInput(2.0, 0.0), 0.05)
    np.testing.assert_allclose(z.to_array(), [0.1, 0.0, 0.0], atol=1e-15)
    z = unicycle_step(UnicycleState(0.0, 0.0, math.pi / 2), UnicycleInput(2.0, 0.0), 0.05)
    np.testing.assert_allclose(z.to_array(), [0.0, 0.1, math.pi / 2], atol=1e-15)


def test_unicycle_matches_hand_evaluation():
    z = unicycle_step(UnicycleState(1.0, -1.0, 0.3), UnicycleInput(1.0, 0.5), 0.05)
    expected = [1.0 + 0.05 * math.cos(0.3), -1.0 + 0.05 * math.sin(0.3), 0.3 + 0.025]
    np.testing.assert_allclose(z.to_array(), expected, atol=1e-12)


def test_unicycle_zero_speed_keeps_position():
    z = UnicycleModel().step(np.array([3.0, 4.0, 1.0]), np.array([0.0, 1.5]), 0.05)
    np.testing.assert_allclose(z[:2], [3.0, 4.0])


def test_rollout_from_rest_is_constant():
    model = BicycleModel()
    states = rollout(model, np.array([1.0, 2.0, 0.5, 0.0]), np.zeros((10, 2)), 0.05)
    assert states.shape == (11, 4)
    np.testing.assert_allclose(states, np.tile([1.0, 2.0, 0.5, 0.0], (11, 1)))


def test_rollout_constant_speed_is_arithmetic():
    states = rollout(UnicycleModel(), np.zeros(3), np.tile([2.0, 0.0], (5, 1)), 0.1)
    np.testing.assert_allclose(states[:, 0], 0.2 * np.arange(6))


def test_rollout_agrees_with_stepping(rng):
    model = BicycleModel()
    inputs = rng.uniform([-4.0, -0.3], [4.0, 0.3], size=(15, 2))
    z0 = np.array([0.0, 1.85, 0.0, 15.0])
    states = rollout(model, z0, inputs, 0.05)
    z = z0
    for k, u in enumerate(inputs):
        z = model.step(z, u, 0.05)
        np.testing.assert_array_equal(states[k + 1], z)


@pytest.mark.parametrize("model", [BicycleModel(), UnicycleModel()])
def test_sensitivities_match_finite_differences(model, rng):
    N, dt, eps = 6, 0.05, 1e-6
    m = model.input_dim
    z0 = np.array([0.0, 0.0, 0.2, 10.0])[:model.state_dim]
    inputs = rng.uniform(-0.2, 0.2, size=(N, m)) + np.array([1.0, 0.0])
    states, sens = rollout_with_sensitivities(model, z0, inputs, dt)
    np.testing.assert_allclose(states, rollout(model, z0, inputs, dt))
    for j in range(N):
        for l in range(m):
            bumped = inputs.copy()
            bumped[j, l] += eps
            lowered = inputs.copy()
            lowered[j, l] -= eps
            numeric = (rollout(model, z0, bumped, dt) - rollout(model, z0, lowered, dt)) / (2 * eps)
            np.testing.assert_allclose(sens[:, :, j, l], numeric, atol=1e-6)


def test_input_bounds_projection():
    bounds = InputBounds(lower=[-4.0, -0.3], upper=[4.0, 0.3], rate=[1.0, 0.2])
    projected = bounds.project(np.array([[4.0, 0.3], [4.0, -0.3]]), np.zeros(2), 0.05)
    np.testing.assert_allclose(projected, [[0.05, 0.01], [0.1, 0.0]])


def test_input_bounds_validation():
    with pytest.raises(DistNmpcError):
        InputBounds(lower=[1.0], upper=[0.0], rate=[1.0])
    with pytest.raises(DistNmpcError):
        InputBounds(lower=[0.0], upper=[1.0], rate=[-1.0])


def test_vehicle_params_must_be_positive():
    with pytest.raises(DistNmpcError):
        VehicleParams(l_f=0.0)


def test_bicycle_polytope_is_rotated_box():
    V = enumerate_vertices(BicycleModel().polytope(np.array([5.0, 1.0, 0.4, 10.0])))
    assert polygon_area(V) == pytest.approx(4.5 * 1.8)
    np.testing.assert_allclose(V.mean(axis=0), [5.0, 1.0], atol=1e-9)


def test_make_model():
    assert make_model("bicycle").name == "bicycle"
    hexagon = regular_polygon(6, 0.5)
    assert make_model("unicycle", shape=hexagon).shape == hexagon
    with pytest.raises(DistNmpcError):
        make_model("boat")


@settings(max_examples=50, deadline=None)
@given(psi=st.floats(-math.pi, math.pi), speeds=st.lists(st.floats(-3.0, 3.0), min_size=1, max_size=10))
def test_unicycle_without_turning_moves_along_heading(psi, speeds):
    inputs = np.column_stack([speeds, np.zeros(len(speeds))])
    states = rollout(UnicycleModel(), np.array([1.0, -2.0, psi]), inputs, 0.1)
    np.testing.assert_array_equal(states[:, 2], psi)
    travelled = 0.1 * sum(speeds)
    np.testing.assert_allclose(states[-1, :2], [1.0 + travelled * math.cos(psi), -2.0 + travelled * math.sin(psi)],
                               atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(inputs=st.lists(st.tuples(st.floats(-4.0, 4.0), st.floats(-0.3, 0.3)), min_size=1, max_size=8))
def test_bicycle_rollout_is_deterministic_and_never_reverses(inputs):
    model = BicycleModel()
    z0 = np.array([0.0, 1.85, 0.0, 2.0])
    first = rollout(model, z0, inputs, 0.05)
    np.testing.assert_array_equal(first, rollout(model, z0, inputs, 0.05))
    assert np.all(first[:, 3] >= 0.0)
