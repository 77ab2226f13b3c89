import itertools
import math

import numpy as np
import pytest

from ca_solver import solve_ca_pair
from dual_distance import solve_dual_distance
from error_bound import (
    StateBox,
    alpha_candidates,
    alpha_min,
    direct_pinv_norm,
    dist_predicted_by_i,
    dist_predicted_by_j,
    error_traces,
    footprint_vector,
    normalization_ratio,
    polytope_constant,
    prediction_error,
    theorem1_bound,
    trivial_bound,
)
from geometry import GeometryError, Pose2, box_polytope, regular_polygon, vehicle_polytope

CAR = box_polytope(4.5, 1.8)


def car_at(pose):
    return vehicle_polytope(Pose2(*pose), 4.5, 1.8)


@pytest.mark.parametrize("psi", [0.0, 0.3, -1.2, math.pi / 2, 2.9])
def test_rectangle_direct_norm_is_one(psi):
    assert direct_pinv_norm(car_at((3.0, -2.0, psi)).A) == pytest.approx(1.0, abs=1e-9)


def test_box_constant_is_sqrt_two():
    A = np.vstack([np.eye(2), -np.eye(2)])
    assert direct_pinv_norm(A) == pytest.approx(1.0)
    assert polytope_constant(A).c == pytest.approx(math.sqrt(2.0))


def test_scaling_halves_pseudo_inverse_norm():
    A = regular_polygon(5, 1.0).A
    assert direct_pinv_norm(2.0 * A) == pytest.approx(0.5 * direct_pinv_norm(A))


def test_rank_deficient_matrix_rejected():
    with pytest.raises(GeometryError):
        direct_pinv_norm(np.array([[1.0, 0.0], [-1.0, 0.0]]))


def test_footprint_vector_matches_vehicle_polytope():
    pose = (4.0, 1.0, 0.6)
    np.testing.assert_allclose(footprint_vector(CAR.A, CAR.b, pose), car_at(pose).b, atol=1e-12)


def test_predicted_distances_without_motion_equal_dual_distance():
    P_i, P_j = car_at((0.0, 0.0, 0.1)), car_at((9.0, 2.0, -0.2))
    sol = solve_dual_distance(P_i, P_j)
    by_i = dist_predicted_by_i(P_i.b, P_j.b, sol.lambda_12, sol.lambda_21)
    by_j = dist_predicted_by_j(P_i.b, P_j.b, sol.lambda_12, sol.lambda_21)
    assert by_i == pytest.approx(sol.distance, abs=1e-8)
    assert by_j == pytest.approx(sol.distance, abs=1e-8)
    assert prediction_error(by_i, by_j) == pytest.approx(0.0, abs=1e-12)


def test_zero_multipliers_predict_zero():
    b = np.ones(4)
    assert dist_predicted_by_i(b, b, np.zeros(4), np.zeros(4)) == 0.0
    assert dist_predicted_by_j(b, b, np.zeros(4), np.zeros(4)) == 0.0


def test_prediction_error():
    assert prediction_error(2.0, 1.5) == pytest.approx(0.5)
    assert prediction_error(1.5, 2.0) == pytest.approx(0.5)


def test_bound_without_motion_is_zero():
    b_i, b_j = car_at((0.0, 0.0, 0.0)).b, car_at((10.0, 0.0, 0.0)).b
    assert theorem1_bound(b_i, b_i, b_j, b_j, 1.0, 1.0) == 0.0


def test_bound_with_one_robot_moving():
    b_prev = car_at((0.0, 0.0, 0.0)).b
    b_now = car_at((1.0, 0.0, 0.0)).b
    b_j = car_at((10.0, 0.0, 0.0)).b
    assert theorem1_bound(b_now, b_prev, b_j, b_j, 1.0, 1.0) == pytest.approx(np.linalg.norm(b_now - b_prev))


def test_prediction_error_never_exceeds_bound(rng):
    for _ in range(50):
        pose_i = np.array([0.0, 0.0, 0.0]) + rng.uniform([-1, -1, -0.5], [1, 1, 0.5])
        pose_j = np.array([9.0, 2.0, 0.0]) + rng.uniform([-1, -1, -0.5], [1, 1, 0.5])
        previous_i, previous_j = car_at(pose_i), car_at(pose_j)
        duals = solve_ca_pair([previous_i], [previous_j], 0.5)
        lam_ij, lam_ji = duals.lambda_ij[0], duals.lambda_ji[0]
        now_i = car_at(pose_i + rng.normal(scale=[0.3, 0.3, 0.05]))
        now_j = car_at(pose_j + rng.normal(scale=[0.3, 0.3, 0.05]))
        error = prediction_error(dist_predicted_by_i(now_i.b, previous_j.b, lam_ij, lam_ji),
                                 dist_predicted_by_j(previous_i.b, now_j.b, lam_ij, lam_ji))
        c_i, c_j = direct_pinv_norm(previous_i.A), direct_pinv_norm(previous_j.A)
        assert error <= theorem1_bound(now_i.b, previous_i.b, now_j.b, previous_j.b, c_i, c_j) + 1e-9


def test_trivial_bound_dominates(rng):
    box_i = StateBox(x=(-5.0, 50.0), y=(0.0, 7.4), psi=(-0.5, 0.5))
    box_j = StateBox(x=(0.0, 60.0), y=(0.0, 7.4), psi=(-0.5, 0.5))
    trivial = trivial_bound(box_i, box_j, CAR.A, CAR.A, 1.0, 1.0)

    def sample(box):
        return np.array([rng.uniform(*box.x), rng.uniform(*box.y), rng.uniform(*box.psi)])

    for _ in range(200):
        bound = theorem1_bound(footprint_vector(CAR.A, CAR.b, sample(box_i)),
                               footprint_vector(CAR.A, CAR.b, sample(box_i)),
                               footprint_vector(CAR.A, CAR.b, sample(box_j)),
                               footprint_vector(CAR.A, CAR.b, sample(box_j)), 1.0, 1.0)
        assert bound <= trivial


def test_trivial_bound_of_a_point_box_is_zero():
    point = StateBox(x=(3.0, 3.0), y=(1.0, 1.0), psi=(0.2, 0.2))
    assert trivial_bound(point, point, CAR.A, CAR.A, 1.0, 1.0) == pytest.approx(0.0)


def test_trivial_bound_rejects_unbounded_box():
    open_road = StateBox(x=(0.0, math.inf), y=(0.0, 7.4), psi=(-0.5, 0.5))
    with pytest.raises(GeometryError):
        trivial_bound(open_road, open_road, CAR.A, CAR.A, 1.0, 1.0)


def test_alpha_min_zero_error_box():
    assert alpha_min((5.0, 1.0, 0.3), (0.0, 0.0, 0.0), CAR.A) == 0.0


def test_alpha_min_matches_enumeration():
    pose = np.array([20.0, 5.55, 0.1])
    errors = (1.0, 0.5, 0.2)

    def b_part(x, y, psi):
        c, s = math.cos(psi), math.sin(psi)
        return CAR.A @ np.array([c * x + s * y, -s * x + c * y])

    reference = b_part(*pose)
    expected = min(
        np.linalg.norm(b_part(pose[0] + sx * errors[0], pose[1] + sy * errors[1], pose[2] + sp * errors[2]) - reference)
        for sx, sy, sp in itertools.product((-1, 1), repeat=3)
    )
    assert alpha_min(pose, errors, CAR.A) == pytest.approx(expected, rel=1e-12)
    assert len(list(alpha_candidates(pose, errors, CAR.A))) == 8


def test_alpha_min_closed_form_without_heading_error():
    e_x, e_y = 1.0, 0.5
    expected = math.sqrt(2.0 * (e_x ** 2 + e_y ** 2))
    assert alpha_min((7.0, 3.0, 0.0), (e_x, e_y, 0.0), CAR.A) == pytest.approx(expected)


def test_normalization_ratio():
    b = car_at((1.0, 2.0, 0.0)).b
    assert normalization_ratio(b, b, 0.3) == 0.0
    assert normalization_ratio(b, b, 0.0) is None


def test_normalization_ratio_at_the_minimizing_corner():
    pose = np.array([20.0, 5.55, 0.1])
    errors = np.array([1.0, 0.5, 0.2])
    signs, alpha = min(alpha_candidates(pose, errors, CAR.A), key=lambda item: item[1])
    moved = pose + np.array(signs) * errors
    ratio = normalization_ratio(footprint_vector(CAR.A, CAR.b, moved), footprint_vector(CAR.A, CAR.b, pose), alpha)
    assert ratio == pytest.approx(1.0, abs=1e-9)


def test_error_traces_group_rows_by_pair():
    rows = [
        {"t": 1, "robot_i": 0, "robot_j": 1, "e_predict": 0.1, "bound": 0.2},
        {"t": 0, "robot_i": 0, "robot_j": 1, "e_predict": 0.0, "bound": 0.0},
        {"t": 0, "robot_i": 1, "robot_j": 2, "e_predict": 0.3, "bound": 0.2},
    ]
    traces = error_traces(rows)
    assert set(traces) == {(0, 1), (1, 2)}
    np.testing.assert_array_equal(traces[(0, 1)].column("t"), [0, 1])
    assert traces[(0, 1)].holds()
    assert not traces[(1, 2)].holds()
