"""
Dual formulation of the distance between two convex polytopes.

The solver works on the closest-point QP

    min 1/2 ||x - y||^2   s.t.  A1 x <= b1,  A2 y <= b2

with an operator-splitting (ADMM) iteration, and periodically "polishes" the
iterate: guess the active rows, solve the KKT system exactly and accept the
result if every sign and feasibility condition holds. When polishing keeps
failing the closest points are computed exactly (vertex-edge search in 2D,
SLSQP otherwise) and the multipliers recovered from the support LPs. The
polished point gives the dual variables of the distance problem directly:

    lambda_12 = mu_1 / d,  lambda_21 = mu_2 / d,  s = (x - y) / d

so that A1^T lambda_12 + s = 0, A2^T lambda_21 - s = 0, ||s|| = 1 and
-b1^T lambda_12 - b2^T lambda_21 = d. Note s points from P2 toward P1.
"""
import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.optimize import linprog, minimize, nnls

from geometry import DistNmpcError, GeometryError, Hyperplane, enumerate_vertices, oracle_distance

logger = logging.getLogger(__name__)

MAX_ITERATIONS = 5000
POLISH_EVERY = 25
# Planar pairs switch to the exact closest-point search after this many iterations
EXACT_AFTER = 500
KKT_TOL = 1e-9
# Below this closest-point distance the pair is reported as intersecting
INTERSECT_TOL = 1e-9
CERTIFICATE_TOL = 1e-7


class DimensionError(DistNmpcError):
    """Raised when two polytopes live in different dimensions"""


class DualStatus(str, Enum):
    OPTIMAL = "optimal"
    INTERSECTING = "intersecting"
    FAILED = "failed"


@dataclass(frozen=True)
class DualSolution:
    distance: float
    lambda_12: np.ndarray
    lambda_21: np.ndarray
    s: np.ndarray
    status: DualStatus
    point_1: np.ndarray
    point_2: np.ndarray
    iterations: int = 0

    @property
    def objective(self):
        return self.distance

    def swapped(self):
        return DualSolution(self.distance, self.lambda_21, self.lambda_12, -self.s, self.status,
                            self.point_2, self.point_1, self.iterations)


@dataclass(frozen=True)
class CertificateReport:
    feasible: bool
    residuals: dict


class _ClosestPointQP:
    """Normalized, recentered closest-point QP for one pair of polytopes"""

    def __init__(self, P1, P2, rho=1.0, sigma=1e-6):
        self.n = P1.n
        self.m1, self.m2 = P1.m, P2.m
        self.row_norm_1 = np.linalg.norm(P1.A, axis=1)
        self.row_norm_2 = np.linalg.norm(P2.A, axis=1)
        A1 = P1.A / self.row_norm_1[:, None]
        A2 = P2.A / self.row_norm_2[:, None]
        b1 = P1.b / self.row_norm_1
        b2 = P2.b / self.row_norm_2

        # Shift the origin between the two bodies; distances and duals are unchanged
        c1 = np.linalg.lstsq(A1, b1, rcond=None)[0]
        c2 = np.linalg.lstsq(A2, b2, rcond=None)[0]
        self.center = 0.5 * (c1 + c2)
        self.A1, self.A2 = A1, A2
        self.b1 = b1 - A1 @ self.center
        self.b2 = b2 - A2 @ self.center

        n = self.n
        self.G = np.zeros((self.m1 + self.m2, 2 * n))
        self.G[:self.m1, :n] = A1
        self.G[self.m1:, n:] = A2
        self.h = np.concatenate([self.b1, self.b2])
        self.Q = np.block([[np.eye(n), -np.eye(n)], [-np.eye(n), np.eye(n)]])
        self.rho, self.sigma = rho, sigma
        self.K_inv = np.linalg.inv(self.Q + sigma * np.eye(2 * n) + rho * self.G.T @ self.G)

    def scale(self):
        return 1.0 + float(np.max(np.abs(self.h)))

    def warm_state(self, warm):
        """ADMM state (u, z, y) reconstructed from a previous solution, or a cold start"""
        n = self.n
        if warm is None or warm.lambda_12.shape != (self.m1,) or warm.lambda_21.shape != (self.m2,) \
                or warm.point_1.shape != (n,):
            u = np.zeros(2 * n)
            y = np.zeros(self.m1 + self.m2)
        else:
            u = np.concatenate([warm.point_1 - self.center, warm.point_2 - self.center])
            d = max(warm.distance, 0.0)
            y = np.concatenate([warm.lambda_12 * self.row_norm_1 * d,
                                warm.lambda_21 * self.row_norm_2 * d])
        z = np.minimum(self.G @ u, self.h)
        return u, z, y

    def iterate(self, u, z, y):
        u = self.K_inv @ (self.sigma * u + self.G.T @ (self.rho * z - y))
        Gu = self.G @ u
        z = np.minimum(Gu + y / self.rho, self.h)
        y = y + self.rho * (Gu - z)
        return u, z, y

    def residuals(self, u, z, y):
        primal = float(np.max(np.abs(self.G @ u - z)))
        dual = float(np.max(np.abs(self.Q @ u + self.G.T @ y)))
        return primal, dual

    def certify_intersection(self, u):
        n = self.n
        mid = 0.5 * (u[:n] + u[n:])
        tol = KKT_TOL * self.scale()
        return bool(np.all(self.A1 @ mid <= self.b1 + tol) and np.all(self.A2 @ mid <= self.b2 + tol))

    def polish(self, u, z, y):
        """Exact KKT solve on the guessed active set; None if any check fails"""
        n = self.n
        active = self.G @ u + y / self.rho >= self.h - 1e-12 * self.scale()
        I = np.flatnonzero(active[:self.m1])
        J = np.flatnonzero(active[self.m1:])
        if len(I) == 0 or len(J) == 0:
            return None

        A1_I, A2_J = self.A1[I], self.A2[J]
        k1, k2 = len(I), len(J)
        size = 2 * n + k1 + k2
        M = np.zeros((size, size))
        M[:n, :n] = np.eye(n)
        M[:n, n:2 * n] = -np.eye(n)
        M[n:2 * n, :n] = -np.eye(n)
        M[n:2 * n, n:2 * n] = np.eye(n)
        M[:n, 2 * n:2 * n + k1] = A1_I.T
        M[n:2 * n, 2 * n + k1:] = A2_J.T
        M[2 * n:2 * n + k1, :n] = A1_I
        M[2 * n + k1:, n:2 * n] = A2_J
        rhs = np.concatenate([np.zeros(2 * n), self.b1[I], self.b2[J]])

        # Minimum-distance solution to the ADMM iterate along any nullspace directions
        U, S, Vt = np.linalg.svd(M)
        rank = int(np.sum(S > 1e-10 * S[0]))
        particular = Vt[:rank].T @ ((U[:, :rank].T @ rhs) / S[:rank])
        reference = np.concatenate([u, y[I], y[self.m1 + J]])
        null = Vt[rank:].T
        solution = particular + null @ (null.T @ (reference - particular))

        tol = KKT_TOL * self.scale()
        if np.max(np.abs(M @ solution - rhs)) > tol:
            return None
        x, w = solution[:n], solution[n:2 * n]
        mu_1, mu_2 = solution[2 * n:2 * n + k1], solution[2 * n + k1:]
        if np.any(mu_1 < -tol) or np.any(mu_2 < -tol):
            return None
        if np.any(self.A1 @ x > self.b1 + tol) or np.any(self.A2 @ w > self.b2 + tol):
            return None

        mu = np.zeros(self.m1 + self.m2)
        mu[I] = np.maximum(mu_1, 0.0)
        mu[self.m1 + J] = np.maximum(mu_2, 0.0)
        return x, w, mu

    def to_solution(self, P1, P2, x, w, mu, iterations):
        d = float(np.linalg.norm(x - w))
        point_1, point_2 = x + self.center, w + self.center
        if d <= INTERSECT_TOL * self.scale():
            return _zero_distance(P1, P2, 0.5 * (point_1 + point_2), iterations, self.scale())
        lambda_12 = mu[:self.m1] / d / self.row_norm_1
        lambda_21 = mu[self.m1:] / d / self.row_norm_2
        return DualSolution(d, lambda_12, lambda_21, (x - w) / d, DualStatus.OPTIMAL,
                            point_1, point_2, iterations)


def _intersecting(m1, m2, n, point_1, point_2, iterations):
    return DualSolution(0.0, np.zeros(m1), np.zeros(m2), np.zeros(n), DualStatus.INTERSECTING,
                        point_1, point_2, iterations)


def _zero_distance(P1, P2, point, iterations, scale):
    """
    Touching pairs keep a valid separating direction: some facet normal of one
    body supports both with zero gap. Anything deeper is intersecting.
    """
    candidates = np.vstack([-P1.A / np.linalg.norm(P1.A, axis=1)[:, None],
                            P2.A / np.linalg.norm(P2.A, axis=1)[:, None]])
    if P1.n == 2:
        V1, V2 = enumerate_vertices(P1), enumerate_vertices(P2)
        gaps = (V1 @ candidates.T).min(axis=0) - (V2 @ candidates.T).max(axis=0)
    else:
        gaps = np.array([support_multiplier(P1, s)[1] + support_multiplier(P2, -s)[1]
                         for s in candidates])
    best = int(np.argmax(gaps))
    if gaps[best] < -INTERSECT_TOL * scale:
        return _intersecting(P1.m, P2.m, P1.n, point, point, iterations)
    s = candidates[best]
    lambda_12, _ = support_multiplier(P1, s)
    lambda_21, _ = support_multiplier(P2, -s)
    return DualSolution(0.0, lambda_12, lambda_21, s, DualStatus.OPTIMAL, point, point, iterations)


def _closest_points_planar(V1, V2):
    """Closest pair between two disjoint convex polygons: always a vertex against an edge"""
    best = (np.inf, None, None)
    for points, polygon, flipped in ((V1, V2, False), (V2, V1, True)):
        start = polygon
        edge = np.roll(polygon, -1, axis=0) - polygon
        length = np.maximum((edge * edge).sum(axis=1), 1e-300)
        offset = points[:, None, :] - start[None, :, :]
        t = np.clip((offset * edge[None]).sum(axis=2) / length[None], 0.0, 1.0)
        foot = start[None] + t[..., None] * edge[None]
        dist = np.linalg.norm(points[:, None, :] - foot, axis=2)
        i, j = np.unravel_index(np.argmin(dist), dist.shape)
        if dist[i, j] < best[0]:
            pair = (foot[i, j], points[i]) if flipped else (points[i], foot[i, j])
            best = (dist[i, j], *pair)
    return best[1], best[2]


def _closest_points_general(P1, P2, start):
    n = P1.n
    zeros_1 = np.zeros((P1.m, n))
    zeros_2 = np.zeros((P2.m, n))
    constraints = [
        {"type": "ineq", "fun": lambda v: P1.b - P1.A @ v[:n], "jac": lambda v: np.hstack([-P1.A, zeros_1])},
        {"type": "ineq", "fun": lambda v: P2.b - P2.A @ v[n:], "jac": lambda v: np.hstack([zeros_2, -P2.A])},
    ]
    result = minimize(lambda v: 0.5 * float(np.sum((v[:n] - v[n:]) ** 2)), start,
                      jac=lambda v: np.concatenate([v[:n] - v[n:], v[n:] - v[:n]]),
                      constraints=constraints, method="SLSQP", options={"ftol": 1e-15, "maxiter": 500})
    x, w = result.x[:n], result.x[n:]
    if not (P1.contains(x, tol=1e-8) and P2.contains(w, tol=1e-8)):
        return None
    return x, w


def _exact_solution(P1, P2, qp, u, iterations):
    """Closest points computed directly, multipliers recovered from the support LPs"""
    n = qp.n
    if n == 2:
        if oracle_distance(P1, P2) == 0.0:
            mid = 0.5 * (u[:n] + u[n:]) + qp.center
            return _zero_distance(P1, P2, mid, iterations, qp.scale())
        x, w = _closest_points_planar(enumerate_vertices(P1), enumerate_vertices(P2))
    else:
        points = _closest_points_general(P1, P2, u + np.concatenate([qp.center, qp.center]))
        if points is None:
            return None
        x, w = points
    d = float(np.linalg.norm(x - w))
    if d <= INTERSECT_TOL * qp.scale():
        return _zero_distance(P1, P2, 0.5 * (x + w), iterations, qp.scale())
    s = (x - w) / d
    lambda_12, _ = support_multiplier(P1, s)
    lambda_21, _ = support_multiplier(P2, -s)
    return DualSolution(d, lambda_12, lambda_21, s, DualStatus.OPTIMAL, x, w, iterations)


def solve_dual_distance(P1, P2, warm=None, max_iterations=MAX_ITERATIONS):
    """
    Distance between P1 and P2 together with the optimal dual variables.

    A warm start (a DualSolution of a nearby problem) is polished before the
    first iteration, so re-solving an unchanged pair returns immediately.
    Touching pairs are OPTIMAL with distance 0 and coincident supporting
    hyperplanes; only overlapping pairs are INTERSECTING.
    """
    if P1.n != P2.n:
        raise DimensionError(f"Polytopes live in different dimensions: {P1.n} vs {P2.n}")
    if not P1.is_bounded() or not P2.is_bounded():
        raise GeometryError("Dual distance requires bounded polytopes")

    qp = _ClosestPointQP(P1, P2)
    u, z, y = qp.warm_state(warm)
    exact_at = min(EXACT_AFTER, max_iterations) if qp.n == 2 else max_iterations

    for iteration in range(max_iterations + 1):
        if iteration % POLISH_EVERY == 0 or iteration == exact_at:
            if iteration > 0 and qp.certify_intersection(u) and \
                    np.linalg.norm(u[:qp.n] - u[qp.n:]) <= 1e-7 * qp.scale():
                mid = 0.5 * (u[:qp.n] + u[qp.n:]) + qp.center
                return _zero_distance(P1, P2, mid, iteration, qp.scale())
            polished = qp.polish(u, z, y)
            if polished is not None:
                return qp.to_solution(P1, P2, *polished, iteration)
        if iteration == exact_at:
            logger.debug(f"Polishing stalled after {iteration} iterations, solving closest points directly")
            exact = _exact_solution(P1, P2, qp, u, iteration)
            if exact is not None:
                return exact
            if iteration == max_iterations:
                break
            exact_at = max_iterations
        u, z, y = qp.iterate(u, z, y)

    primal, dual = qp.residuals(u, z, y)
    logger.warning(f"Dual distance did not converge after {max_iterations} iterations "
                   f"(primal residual {primal:.2e}, dual residual {dual:.2e})")
    n = qp.n
    return DualSolution(float(np.linalg.norm(u[:n] - u[n:])), np.zeros(qp.m1), np.zeros(qp.m2),
                        np.zeros(n), DualStatus.FAILED, u[:n] + qp.center, u[n:] + qp.center,
                        max_iterations)


def dual_objective(P1, P2, lambda_12, lambda_21):
    return float(-P1.b @ lambda_12 - P2.b @ lambda_21)


def feasibility_certificate(P1, P2, lambda_12, lambda_21, s, d_min, tol=CERTIFICATE_TOL):
    """
    Check that (lambda_12, lambda_21, s) proves dist(P1, P2) >= d_min.
    Residuals are all zero for a valid certificate.
    """
    lambda_12 = np.asarray(lambda_12, dtype=float)
    lambda_21 = np.asarray(lambda_21, dtype=float)
    s = np.asarray(s, dtype=float)
    residuals = {
        "distance": max(0.0, d_min - dual_objective(P1, P2, lambda_12, lambda_21)),
        "stationarity_1": float(np.max(np.abs(P1.A.T @ lambda_12 + s))),
        "stationarity_2": float(np.max(np.abs(P2.A.T @ lambda_21 - s))),
        "norm": max(0.0, float(np.linalg.norm(s)) - 1.0),
        "nonnegativity": max(0.0, -float(min(lambda_12.min(initial=0.0), lambda_21.min(initial=0.0)))),
    }
    return CertificateReport(all(value <= tol for value in residuals.values()), residuals)


def separating_hyperplane(solution, P1):
    """Hyperplane midway between the two bodies, normal s"""
    if solution.status != DualStatus.OPTIMAL:
        raise GeometryError(f"No separating hyperplane for a {solution.status.value} pair")
    support_1 = float(-P1.b @ solution.lambda_12)
    return Hyperplane(solution.s, support_1 - 0.5 * solution.distance)


def supporting_hyperplanes(solution, P1, P2):
    """Pair of hyperplanes touching P1 and P2, a distance `solution.distance` apart"""
    if solution.status != DualStatus.OPTIMAL:
        raise GeometryError(f"No supporting hyperplanes for a {solution.status.value} pair")
    return (Hyperplane(solution.s, float(-P1.b @ solution.lambda_12)),
            Hyperplane(solution.s, float(P2.b @ solution.lambda_21)))


def support_multiplier(P, direction):
    """
    Multiplier lambda >= 0 with A^T lambda = -direction that attains
    min_{x in P} direction . x = -b^T lambda. Returns (lambda, value).
    """
    direction = np.asarray(direction, dtype=float)
    if not np.any(direction):
        return np.zeros(P.m), 0.0
    if P.n == 2:
        vertices = enumerate_vertices(P)
        vertex = vertices[np.argmin(vertices @ direction)]
        active = np.flatnonzero(np.abs(P.A @ vertex - P.b) <= 1e-8 * (1.0 + np.abs(P.b)))
        weights, residual = nnls(P.A[active].T, -direction)
        if residual <= 1e-9 * (1.0 + np.linalg.norm(direction)):
            lam = np.zeros(P.m)
            lam[active] = weights
            return lam, float(-P.b @ lam)
    result = linprog(P.b, A_eq=P.A.T, b_eq=-direction, bounds=[(0, None)] * P.m, method="highs",
                     options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10})
    if result.status != 0:
        raise GeometryError(f"Support multiplier LP failed: {result.message}")
    return result.x, float(-P.b @ result.x)
