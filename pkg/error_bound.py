"""
Bounds on the disagreement between the two distances each robot of a pair
predicts from the shared duals.

With frozen duals, robot i's view of the pair distance is
-b_i(t)^T lambda_ij - b_j(t-1)^T lambda_ji and robot j's view is the mirror;
their gap is bounded by c_i ||Db_i|| + c_j ||Db_j|| where Db is how far each
footprint's b-vector moved between consecutive predictions.
"""
import itertools
import math
from dataclasses import dataclass

import numpy as np

from geometry import GeometryError, rotation_matrix

# Default acceptable per-step prediction error in x, y and heading
DEFAULT_ERROR_BOX = (1.0, 0.5, 0.2)


@dataclass(frozen=True)
class PolytopeConstant:
    c: float


@dataclass(frozen=True)
class StateBox:
    """Position and heading limits a robot stays inside for a whole run"""
    x: tuple
    y: tuple
    psi: tuple

    @property
    def position_corners(self):
        return np.array(list(itertools.product(self.x, self.y)))


@dataclass
class ErrorTrace:
    """Per-step audit rows for one pair"""
    pair: tuple
    rows: list

    def column(self, name):
        return np.array([row[name] for row in self.rows], dtype=float)

    def holds(self, tolerance=1e-9):
        """True when the prediction error never exceeds the bound"""
        return bool(np.all(self.column("e_predict") <= self.column("bound") + tolerance))


def error_traces(rows):
    """Group error-trace rows by pair, in step order"""
    traces = {}
    for row in sorted(rows, key=lambda row: (row["robot_i"], row["robot_j"], row["t"])):
        pair = (row["robot_i"], row["robot_j"])
        traces.setdefault(pair, ErrorTrace(pair, [])).rows.append(row)
    return traces


def direct_pinv_norm(A):
    """||pinv(A^T)||_F at the actual pose"""
    A = np.asarray(A, dtype=float)
    if np.linalg.matrix_rank(A) < A.shape[1]:
        raise GeometryError("Polytope constraint matrix is rank deficient")
    return float(np.linalg.norm(np.linalg.pinv(A.T), "fro"))


def polytope_constant(A_base):
    """Pose-independent constant c = sqrt(2) ||pinv(A_O^T)||_F"""
    return PolytopeConstant(math.sqrt(2.0) * direct_pinv_norm(A_base))


def footprint_vector(A_base, b_base, pose):
    """b(z) = b_O + A_O R(psi)^T p"""
    R = rotation_matrix(pose[2])
    return np.asarray(b_base) + np.asarray(A_base) @ R.T @ np.asarray(pose[:2], dtype=float)


def dist_predicted_by_i(b_i_now, b_j_prev, lambda_ij, lambda_ji):
    """Robot i: its fresh footprint against the neighbor's stale one"""
    return float(-np.asarray(b_i_now) @ lambda_ij - np.asarray(b_j_prev) @ lambda_ji)


def dist_predicted_by_j(b_i_prev, b_j_now, lambda_ij, lambda_ji):
    return float(-np.asarray(b_i_prev) @ lambda_ij - np.asarray(b_j_now) @ lambda_ji)


def prediction_error(dist_i, dist_j):
    return abs(dist_i - dist_j)


def theorem1_bound(b_i_now, b_i_prev, b_j_now, b_j_prev, c_i, c_j):
    """c_i ||b_i(t) - b_i(t-1)|| + c_j ||b_j(t) - b_j(t-1)||"""
    return float(c_i * np.linalg.norm(np.asarray(b_i_now) - b_i_prev)
                 + c_j * np.linalg.norm(np.asarray(b_j_now) - b_j_prev))


def _max_footprint_change(A_base, box):
    """Upper bound on ||b(z) - b(z')|| over two poses inside the box"""
    spectral = float(np.linalg.norm(np.asarray(A_base, dtype=float), 2))
    corners = box.position_corners
    diagonal = float(np.linalg.norm(corners.max(axis=0) - corners.min(axis=0)))
    reach = float(np.max(np.linalg.norm(corners, axis=1)))
    turn = min(box.psi[1] - box.psi[0], math.pi)
    # ||R'^T p' - R^T p|| <= ||p' - p|| + ||R' - R|| ||p||
    return spectral * (diagonal + 2.0 * math.sin(turn / 2.0) * reach)


def trivial_bound(box_i, box_j, A_base_i, A_base_j, c_i, c_j):
    """The bound evaluated at the largest footprint change the state boxes allow"""
    for box in (box_i, box_j):
        if not np.all(np.isfinite(np.concatenate([box.x, box.y, box.psi]))):
            raise GeometryError("Trivial bound needs a bounded state box")
    return c_i * _max_footprint_change(A_base_i, box_i) + c_j * _max_footprint_change(A_base_j, box_j)


def alpha_candidates(pose, error_box, A_base):
    """Footprint change for each sign combination of the acceptable error box"""
    pose = np.asarray(pose, dtype=float)
    e_x, e_y, e_psi = error_box
    A_base = np.asarray(A_base, dtype=float)
    b_ref = A_base @ rotation_matrix(pose[2]).T @ pose[:2]
    for sx, sy, spsi in itertools.product((-1.0, 1.0), repeat=3):
        moved = pose + np.array([sx * e_x, sy * e_y, spsi * e_psi])
        change = A_base @ rotation_matrix(moved[2]).T @ moved[:2] - b_ref
        yield (sx, sy, spsi), float(np.linalg.norm(change))


def alpha_min(pose, error_box, A_base):
    """Smallest footprint change over the corners of the acceptable error box"""
    return min(value for _, value in alpha_candidates(pose, error_box, A_base))


def normalization_ratio(b_now, b_prev, alpha):
    """||Db|| / alpha_min; None when alpha_min is not positive"""
    if alpha <= 0.0:
        return None
    return float(np.linalg.norm(np.asarray(b_now) - np.asarray(b_prev))) / alpha
