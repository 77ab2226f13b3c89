"""
Discrete-time robot models (forward Euler) and their Jacobians.

Models work on flat numpy vectors so the NMPC layer can stack them; the small
state/input dataclasses are the readable surface used by scenarios and tests.
"""
import math
from dataclasses import dataclass

import numpy as np

from geometry import DistNmpcError, Polytope, Pose2, box_polytope, transform_base_polytope


@dataclass(frozen=True)
class VehicleParams:
    l_f: float = 1.125
    l_r: float = 1.125
    h: float = 4.5
    w: float = 1.8

    def __post_init__(self):
        if self.l_f <= 0 or self.l_r <= 0:
            raise DistNmpcError(f"Axle distances must be positive, got l_f={self.l_f}, l_r={self.l_r}")

    @property
    def wheelbase(self):
        return self.l_f + self.l_r


@dataclass(frozen=True)
class BicycleState:
    x: float
    y: float
    psi: float
    v: float

    def to_array(self):
        return np.array([self.x, self.y, self.psi, self.v])

    @classmethod
    def from_array(cls, z):
        return cls(*(float(value) for value in z))


@dataclass(frozen=True)
class BicycleInput:
    a: float
    delta: float

    def to_array(self):
        return np.array([self.a, self.delta])


@dataclass(frozen=True)
class UnicycleState:
    x: float
    y: float
    psi: float

    def to_array(self):
        return np.array([self.x, self.y, self.psi])

    @classmethod
    def from_array(cls, z):
        return cls(*(float(value) for value in z))


@dataclass(frozen=True)
class UnicycleInput:
    v: float
    delta: float

    def to_array(self):
        return np.array([self.v, self.delta])


@dataclass(frozen=True)
class InputBounds:
    """Box bounds on each input and on its rate of change (units per second)"""
    lower: np.ndarray
    upper: np.ndarray
    rate: np.ndarray

    def __post_init__(self):
        for name in ("lower", "upper", "rate"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if np.any(self.lower > self.upper):
            raise DistNmpcError(f"Input lower bound exceeds upper bound: {self.lower} > {self.upper}")
        if np.any(self.rate < 0):
            raise DistNmpcError("Input rate bounds must be non-negative")

    def project(self, inputs, previous, dt):
        """Clip an input sequence into the box and the rate limits, step by step"""
        projected = np.array(inputs, dtype=float)
        anchor = np.clip(np.asarray(previous, dtype=float), self.lower, self.upper)
        for k in range(len(projected)):
            step = np.clip(projected[k], anchor - self.rate * dt, anchor + self.rate * dt)
            projected[k] = np.clip(step, self.lower, self.upper)
            anchor = projected[k]
        return projected


class BicycleModel:
    """Kinematic bicycle; the footprint is an h x w rectangle"""
    name = "bicycle"
    state_dim = 4
    input_dim = 2
    default_bounds = InputBounds(lower=[-4.0, -0.3], upper=[4.0, 0.3], rate=[1.0, 0.2])

    def __init__(self, params=None):
        self.params = params or VehicleParams()
        self.shape = box_polytope(self.params.h, self.params.w)

    def _slip(self, delta):
        kappa = self.params.l_r / self.params.wheelbase
        tan_delta = math.tan(delta)
        beta = math.atan(kappa * tan_delta)
        dbeta = kappa / math.cos(delta) ** 2 / (1.0 + (kappa * tan_delta) ** 2)
        return beta, dbeta

    def step(self, z, u, dt):
        x, y, psi, v = z
        a, delta = u
        beta, _ = self._slip(delta)
        L = self.params.wheelbase
        return np.array([
            x + dt * v * math.cos(psi + beta),
            y + dt * v * math.sin(psi + beta),
            psi + dt * v * math.cos(beta) * math.tan(delta) / L,
            max(0.0, v + dt * a),
        ])

    def jacobians(self, z, u, dt):
        """(dz+/dz, dz+/du) at (z, u)"""
        x, y, psi, v = z
        a, delta = u
        beta, dbeta = self._slip(delta)
        L = self.params.wheelbase
        c, s = math.cos(psi + beta), math.sin(psi + beta)
        yaw = math.cos(beta) * math.tan(delta) / L
        dyaw = (-math.sin(beta) * dbeta * math.tan(delta) + math.cos(beta) / math.cos(delta) ** 2) / L
        moving = v + dt * a > 0.0

        F = np.eye(4)
        F[0, 2] = -dt * v * s
        F[0, 3] = dt * c
        F[1, 2] = dt * v * c
        F[1, 3] = dt * s
        F[2, 3] = dt * yaw
        F[3, 3] = 1.0 if moving else 0.0

        G = np.zeros((4, 2))
        G[0, 1] = -dt * v * s * dbeta
        G[1, 1] = dt * v * c * dbeta
        G[2, 1] = dt * v * dyaw
        G[3, 0] = dt if moving else 0.0
        return F, G

    def pose(self, z):
        return Pose2(z[0], z[1], z[2])

    def polytope(self, z):
        return transform_base_polytope(self.shape, self.pose(z))


class UnicycleModel:
    """Unicycle with velocity and turn-rate inputs; any convex base shape"""
    name = "unicycle"
    state_dim = 3
    input_dim = 2
    default_bounds = InputBounds(lower=[-4.0, -2.0], upper=[4.0, 2.0], rate=[0.5, 0.5])

    def __init__(self, shape=None):
        self.shape = shape if shape is not None else box_polytope(0.8, 0.8)
        if not isinstance(self.shape, Polytope):
            raise DistNmpcError("Unicycle shape must be a Polytope")
        transform_base_polytope(self.shape, Pose2(0.0, 0.0, 0.0))

    def step(self, z, u, dt):
        x, y, psi = z
        v, delta = u
        return np.array([x + dt * v * math.cos(psi), y + dt * v * math.sin(psi), psi + dt * delta])

    def jacobians(self, z, u, dt):
        _, _, psi = z
        v, _ = u
        c, s = math.cos(psi), math.sin(psi)
        F = np.eye(3)
        F[0, 2] = -dt * v * s
        F[1, 2] = dt * v * c
        G = np.array([[dt * c, 0.0], [dt * s, 0.0], [0.0, dt]])
        return F, G

    def pose(self, z):
        return Pose2(z[0], z[1], z[2])

    def polytope(self, z):
        return transform_base_polytope(self.shape, self.pose(z))


def bicycle_step(z, u, dt, params=None):
    """One Euler step of the kinematic bicycle on the dataclass surface"""
    model = BicycleModel(params)
    return BicycleState.from_array(model.step(z.to_array(), u.to_array(), dt))


def unicycle_step(z, u, dt):
    return UnicycleState.from_array(UnicycleModel().step(z.to_array(), u.to_array(), dt))


def rollout(model, z0, inputs, dt):
    """States z_0..z_N (shape (N+1, nz)) produced by applying inputs (N, m) from z0"""
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    states = np.zeros((len(inputs) + 1, model.state_dim))
    states[0] = z0
    for k, u in enumerate(inputs):
        states[k + 1] = model.step(states[k], u, dt)
    return states


def rollout_with_sensitivities(model, z0, inputs, dt):
    """
    Rollout plus dz_k/du_j for all k, j: array of shape (N+1, nz, N, m) with
    S_{k+1} = F_k S_k + G_k E_k.
    """
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    N, m = inputs.shape
    nz = model.state_dim
    states = np.zeros((N + 1, nz))
    sens = np.zeros((N + 1, nz, N, m))
    states[0] = z0
    for k in range(N):
        F, G = model.jacobians(states[k], inputs[k], dt)
        states[k + 1] = model.step(states[k], inputs[k], dt)
        sens[k + 1] = np.einsum("ij,jkl->ikl", F, sens[k])
        sens[k + 1, :, k, :] += G
    return states, sens


def make_model(name, params=None, shape=None):
    if name == "bicycle":
        return BicycleModel(params)
    if name == "unicycle":
        return UnicycleModel(shape)
    raise DistNmpcError(f"Unknown model '{name}'")
