import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog
from scipy.spatial import ConvexHull

# Determinant tolerance for treating two edge lines as parallel
PARALLEL_TOL = 1e-10
# Slack allowed when checking A v <= b for enumerated vertices
FEASIBILITY_TOL = 1e-9


class DistNmpcError(Exception):
    """Base class for every error raised by this package"""


class GeometryError(DistNmpcError):
    """Raised for empty, unbounded or malformed polytopes"""


def wrap_angle(psi):
    """Wrap an angle to (-pi, pi]"""
    return math.pi - (math.pi - psi) % (2 * math.pi)


@dataclass(frozen=True)
class Pose2:
    x: float
    y: float
    psi: float

    def __post_init__(self):
        object.__setattr__(self, "psi", wrap_angle(float(self.psi)))

    @property
    def position(self):
        return np.array([self.x, self.y])


@dataclass(frozen=True, eq=False)
class Polytope:
    """
    Halfspace polytope {p : A p <= b}.

    Arrays are copied and frozen on construction so a Polytope can be shared
    between agents and threads.
    """
    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        A = np.array(self.A, dtype=float)
        b = np.array(self.b, dtype=float).reshape(-1)
        if A.ndim != 2 or A.shape[0] != b.shape[0]:
            raise GeometryError(
                f"Halfspace shapes do not match: A {A.shape}, b {b.shape}")
        if A.shape[1] not in (2, 3):
            raise GeometryError(f"Only 2D and 3D polytopes are supported, got n={A.shape[1]}")
        if np.any(np.linalg.norm(A, axis=1) <= 0.0):
            raise GeometryError("Every halfspace normal must be nonzero")
        A.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @property
    def n(self):
        return self.A.shape[1]

    @property
    def m(self):
        return self.A.shape[0]

    def contains(self, point, tol=FEASIBILITY_TOL):
        return bool(np.all(self.A @ np.asarray(point, dtype=float) <= self.b + tol))

    def translate(self, t):
        t = np.asarray(t, dtype=float)
        return Polytope(self.A, self.b + self.A @ t)

    def rotate(self, psi):
        """Rotate about the origin (2D only)"""
        return Polytope(self.A @ rotation_matrix(psi).T, self.b)

    def is_bounded(self):
        if self.n == 2:
            return _normals_span_plane(self.A)
        # Bounded iff every coordinate direction has a finite LP maximum
        for direction in np.vstack([np.eye(self.n), -np.eye(self.n)]):
            result = linprog(-direction, A_ub=self.A, b_ub=self.b,
                             bounds=[(None, None)] * self.n, method="highs")
            if result.status == 3:
                return False
        return True

    def is_empty(self):
        result = linprog(np.zeros(self.n), A_ub=self.A, b_ub=self.b,
                         bounds=[(None, None)] * self.n, method="highs")
        return result.status == 2

    @property
    def degenerate(self):
        """True when a 2D polytope has fewer than three vertices"""
        if self.n != 2:
            return False
        try:
            return len(enumerate_vertices(self)) < 3
        except GeometryError:
            return True

    def __eq__(self, other):
        if not isinstance(other, Polytope):
            return NotImplemented
        return self.A.shape == other.A.shape and np.array_equal(self.A, other.A) \
            and np.array_equal(self.b, other.b)

    def __hash__(self):
        return hash((self.A.tobytes(), self.b.tobytes()))


@dataclass(frozen=True)
class Hyperplane:
    """The set {x : normal . x = offset} with a unit normal"""
    normal: np.ndarray
    offset: float

    def __post_init__(self):
        normal = np.array(self.normal, dtype=float).reshape(-1)
        norm = np.linalg.norm(normal)
        if norm == 0.0:
            raise GeometryError("Hyperplane normal must be nonzero")
        normal = normal / norm
        normal.setflags(write=False)
        object.__setattr__(self, "normal", normal)
        object.__setattr__(self, "offset", float(self.offset) / norm)

    def signed_distance(self, points):
        return np.atleast_2d(points) @ self.normal - self.offset


def _normals_span_plane(A):
    """A 2D halfspace set is bounded iff no angular gap between normals reaches pi"""
    angles = np.sort(np.arctan2(A[:, 1], A[:, 0]))
    gaps = np.diff(np.concatenate([angles, [angles[0] + 2 * math.pi]]))
    return bool(np.max(gaps) < math.pi - 1e-12)


def rotation_matrix(psi):
    c, s = math.cos(psi), math.sin(psi)
    return np.array([[c, -s], [s, c]])


def box_polytope(h, w):
    """Axis-aligned rectangle of length h (along x) and width w, centered at the origin"""
    if h <= 0 or w <= 0:
        raise GeometryError(f"Rectangle dimensions must be positive, got h={h}, w={w}")
    A = np.vstack([np.eye(2), -np.eye(2)])
    b = np.array([h / 2, w / 2, h / 2, w / 2])
    return Polytope(A, b)


def vehicle_polytope(pose, h, w):
    """Rotated rectangle footprint: A(z) = [R^T; -R^T], b(z) = [h/2, w/2, h/2, w/2] + A(z) p"""
    if h <= 0 or w <= 0:
        raise GeometryError(f"Vehicle dimensions must be positive, got h={h}, w={w}")
    R = rotation_matrix(pose.psi)
    A = np.vstack([R.T, -R.T])
    b = np.array([h / 2, w / 2, h / 2, w / 2]) + A @ pose.position
    return Polytope(A, b)


def transform_base_polytope(base, pose):
    """Rotate a body-frame polytope by psi about the origin, then translate: A = A_O R^T, b = b_O + A p"""
    if base.n != 2:
        raise GeometryError("Pose transforms are defined for planar polytopes only")
    if not base.is_bounded():
        raise GeometryError("Base polytope is unbounded")
    if np.any(base.b <= 0.0):
        raise GeometryError("Base polytope must contain the origin in its interior")
    A = base.A @ rotation_matrix(pose.psi).T
    b = base.b + A @ pose.position
    return Polytope(A, b)


def polygon_from_vertices(vertices):
    """Halfspace form of the convex hull of planar points (unit-norm rows)"""
    points = np.asarray(vertices, dtype=float)
    hull = ConvexHull(points)
    # Qhull equations are [normal, offset] with normal . x + offset <= 0 inside
    A = hull.equations[:, :2]
    b = -hull.equations[:, 2]
    return Polytope(A, b)


def regular_polygon(n_sides, radius, phase=0.0):
    angles = phase + 2 * math.pi * np.arange(n_sides) / n_sides
    return polygon_from_vertices(np.column_stack([radius * np.cos(angles), radius * np.sin(angles)]))


def enumerate_vertices(P):
    """
    Counterclockwise vertex list of a 2D polytope, by intersecting every pair of
    boundary lines and keeping the feasible intersections. Empty when infeasible.
    """
    if P.n != 2:
        raise GeometryError("Vertex enumeration is implemented for 2D polytopes only")
    if not _normals_span_plane(P.A):
        raise GeometryError("Polytope is unbounded")

    A, b = P.A, P.b
    candidates = []
    for i in range(P.m):
        for j in range(i + 1, P.m):
            M = np.array([A[i], A[j]])
            det = M[0, 0] * M[1, 1] - M[0, 1] * M[1, 0]
            if abs(det) < PARALLEL_TOL:
                continue
            point = np.linalg.solve(M, np.array([b[i], b[j]]))
            scale = 1.0 + np.abs(b)
            if np.all(A @ point <= b + FEASIBILITY_TOL * scale):
                candidates.append(point)

    if not candidates:
        return np.zeros((0, 2))

    # Merge duplicates produced by redundant halfspaces through the same corner
    unique = []
    for point in candidates:
        if not any(np.linalg.norm(point - q) < 1e-9 * (1.0 + np.linalg.norm(q)) for q in unique):
            unique.append(point)
    vertices = np.array(unique)

    center = vertices.mean(axis=0)
    order = np.argsort(np.arctan2(vertices[:, 1] - center[1], vertices[:, 0] - center[0]))
    return vertices[order]


def polygon_area(vertices):
    """Shoelace area of a counterclockwise vertex list"""
    v = np.asarray(vertices, dtype=float)
    if len(v) < 3:
        return 0.0
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _point_segment_distance(p, a, b):
    ab = b - a
    denom = float(ab @ ab)
    t = 0.0 if denom == 0.0 else min(1.0, max(0.0, float((p - a) @ ab) / denom))
    return float(np.linalg.norm(p - (a + t * ab)))


def _cross(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def _segments_intersect(p1, p2, q1, q2):
    d1 = _cross(q1, q2, p1)
    d2 = _cross(q1, q2, p2)
    d3 = _cross(p1, p2, q1)
    d4 = _cross(p1, p2, q2)
    if ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)) and d1 != 0 and d2 != 0 \
            and d3 != 0 and d4 != 0:
        return True
    # Collinear and touching cases fall through to the distance computation
    return False


def _segment_segment_distance(p1, p2, q1, q2):
    if _segments_intersect(p1, p2, q1, q2):
        return 0.0
    return min(
        _point_segment_distance(p1, q1, q2),
        _point_segment_distance(p2, q1, q2),
        _point_segment_distance(q1, p1, p2),
        _point_segment_distance(q2, p1, p2),
    )


def oracle_distance(P1, P2):
    """
    Exact Euclidean distance between two convex polygons from their vertex
    lists: zero if one contains a vertex of the other or two edges cross,
    otherwise the minimum over all edge pairs.
    """
    V1 = enumerate_vertices(P1)
    V2 = enumerate_vertices(P2)
    if len(V1) == 0 or len(V2) == 0:
        raise GeometryError("Distance is undefined for an empty polytope")

    if any(P2.contains(v) for v in V1) or any(P1.contains(v) for v in V2):
        return 0.0

    edges1 = [(V1[k], V1[(k + 1) % len(V1)]) for k in range(len(V1))]
    edges2 = [(V2[k], V2[(k + 1) % len(V2)]) for k in range(len(V2))]
    best = math.inf
    for a1, a2 in edges1:
        for c1, c2 in edges2:
            best = min(best, _segment_segment_distance(a1, a2, c1, c2))
            if best == 0.0:
                return 0.0
    return best
