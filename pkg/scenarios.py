"""
Scenario configuration: pydantic schema, builtin experiments and loading.

A scenario is a JSON document (schema_version 1). Builtin names resolve to
the constructors below; anything else is read as a path, then looked up in
data/scenarios/.
"""
import json
import logging
import math
import os
from typing import List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

import settings
from coordinator import RobotAgent, World
from dynamics import BicycleModel, InputBounds, UnicycleModel, VehicleParams
from error_bound import DEFAULT_ERROR_BOX, StateBox
from geometry import DistNmpcError, Polytope, Pose2, box_polytope, polygon_from_vertices, \
    transform_base_polytope
from nmpc import CostWeights, CouplingMode, ReferenceSignal

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
LANE_WIDTH = 3.7
LANE_CENTERS = (1.85, 5.55, 9.25)
PLATOON_X0 = (11.5, 5.5, 0.5, 20.0)
PLATOON_Y0 = (1.85, 5.55, 1.85, 9.25)
STATE_DIMS = {"bicycle": 4, "unicycle": 3}


class ScenarioError(DistNmpcError):
    """Invalid scenario file; `paths` lists the offending dotted field paths"""

    def __init__(self, message, paths=()):
        super().__init__(message)
        self.paths = list(paths)


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ShapeConfig(_Strict):
    kind: Literal["box", "vertices", "halfspaces"]
    h: Optional[float] = None
    w: Optional[float] = None
    vertices: Optional[List[Tuple[float, float]]] = None
    A: Optional[List[Tuple[float, float]]] = None
    b: Optional[List[float]] = None

    @model_validator(mode="after")
    def check_kind(self):
        if self.kind == "box" and (self.h is None or self.w is None or self.h <= 0 or self.w <= 0):
            raise ValueError("box shapes need positive h and w")
        if self.kind == "vertices" and (self.vertices is None or len(self.vertices) < 3):
            raise ValueError("vertex shapes need at least 3 vertices")
        if self.kind == "halfspaces" and (self.A is None or self.b is None or len(self.A) != len(self.b)):
            raise ValueError("halfspace shapes need A and b of equal length")
        return self

    def to_polytope(self):
        if self.kind == "box":
            return box_polytope(self.h, self.w)
        if self.kind == "vertices":
            return polygon_from_vertices(self.vertices)
        return Polytope(np.array(self.A), np.array(self.b))


class ObstacleConfig(_Strict):
    shape: ShapeConfig
    pose: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def to_polytope(self):
        return transform_base_polytope(self.shape.to_polytope(), Pose2(*self.pose))


class WeightsConfig(_Strict):
    """Diagonals of Q_z, Q_u and Q_du"""
    q_z: List[float]
    q_u: List[float]
    q_du: List[float]


class WaypointConfig(_Strict):
    time: float
    state: List[float]


class ReferenceConfig(_Strict):
    goal: Optional[List[float]] = None
    waypoints: Optional[List[WaypointConfig]] = None

    @model_validator(mode="after")
    def check_one_form(self):
        if (self.goal is None) == (self.waypoints is None):
            raise ValueError("give exactly one of goal or waypoints")
        return self


class BoundsConfig(_Strict):
    input_lower: List[float]
    input_upper: List[float]
    rate: List[float]


class StateBoxConfig(_Strict):
    x: Tuple[float, float]
    y: Tuple[float, float]
    psi: Tuple[float, float]


class RobotConfig(_Strict):
    id: int
    model: Literal["bicycle", "unicycle"]
    shape: ShapeConfig
    initial_state: List[float]
    initial_input: Optional[List[float]] = None
    reference: ReferenceConfig
    weights: WeightsConfig
    bounds: Optional[BoundsConfig] = None
    l_f: float = Field(default=1.125, gt=0)
    l_r: float = Field(default=1.125, gt=0)
    state_box: Optional[StateBoxConfig] = None

    @model_validator(mode="after")
    def check_dimensions(self):
        nz = STATE_DIMS[self.model]
        if len(self.initial_state) != nz:
            raise ValueError(f"initial_state needs {nz} entries for a {self.model}")
        if self.model == "bicycle" and self.shape.kind != "box":
            raise ValueError("bicycle robots use a box footprint")
        if self.reference.goal is not None and len(self.reference.goal) != nz:
            raise ValueError(f"reference goal needs {nz} entries")
        for waypoint in self.reference.waypoints or []:
            if len(waypoint.state) != nz:
                raise ValueError(f"reference waypoints need {nz} entries")
        if len(self.weights.q_z) != nz or len(self.weights.q_u) != 2 or len(self.weights.q_du) != 2:
            raise ValueError("weight diagonals must match the state and input sizes")
        return self

    def build_model(self):
        if self.model == "bicycle":
            return BicycleModel(VehicleParams(self.l_f, self.l_r, self.shape.h, self.shape.w))
        return UnicycleModel(self.shape.to_polytope())


class ScenarioConfig(_Strict):
    schema_version: Literal[1] = SCHEMA_VERSION
    name: str
    robots: List[RobotConfig] = Field(min_length=1)
    obstacles: List[ObstacleConfig] = []
    d_min: float = Field(ge=0)
    dt: float = Field(gt=0)
    horizon: int = Field(ge=1)
    steps: int = Field(ge=0)
    mode: Literal["distributed", "centralized"] = "distributed"
    communication_radius: Optional[float] = Field(default=None, gt=0)
    bus_delay: int = Field(default=0, ge=0)
    coupling_mode: Literal["support", "fixed"] = "support"
    trace_error_bound: bool = False
    error_box: Tuple[float, float, float] = DEFAULT_ERROR_BOX
    alpha_constraint: bool = False
    ratio_weight: float = Field(default=0.0, ge=0)
    max_iterations: int = Field(default=100, ge=1)
    seed: Optional[int] = None

    @model_validator(mode="after")
    def check_unique_ids(self):
        ids = [robot.id for robot in self.robots]
        if len(ids) != len(set(ids)):
            raise ValueError(f"robot ids must be unique, got {ids}")
        return self

    def build_world(self):
        """Turn the validated config into the coordinator's runtime objects"""
        robots = []
        for robot in self.robots:
            model = robot.build_model()
            bounds = model.default_bounds if robot.bounds is None else InputBounds(
                robot.bounds.input_lower, robot.bounds.input_upper, robot.bounds.rate)
            if robot.reference.goal is not None:
                reference = ReferenceSignal(goal=robot.reference.goal)
            else:
                waypoints = robot.reference.waypoints
                reference = ReferenceSignal.from_waypoints([w.time for w in waypoints],
                                                           [w.state for w in waypoints],
                                                           self.dt, self.steps + self.horizon)
            box = None
            if robot.state_box is not None:
                box = StateBox(tuple(robot.state_box.x), tuple(robot.state_box.y), tuple(robot.state_box.psi))
            initial_input = robot.initial_input if robot.initial_input is not None else [0.0, 0.0]
            robots.append(RobotAgent(
                robot_id=robot.id,
                model=model,
                weights=CostWeights.diagonal(robot.weights.q_z, robot.weights.q_u, robot.weights.q_du),
                reference=reference,
                bounds=bounds,
                state=np.array(robot.initial_state, dtype=float),
                last_input=np.array(initial_input, dtype=float),
                state_box=box,
            ))
        return World(
            name=self.name,
            robots=robots,
            dt=self.dt,
            horizon=self.horizon,
            d_min=self.d_min,
            steps=self.steps,
            mode=self.mode,
            obstacles=[obstacle.to_polytope() for obstacle in self.obstacles],
            communication_radius=self.communication_radius,
            bus_delay=self.bus_delay,
            coupling_mode=CouplingMode(self.coupling_mode),
            trace_error_bound=self.trace_error_bound,
            error_box=tuple(self.error_box),
            alpha_constraint=self.alpha_constraint,
            ratio_weight=self.ratio_weight,
            max_iterations=self.max_iterations,
        )


def _bicycle_bounds():
    return BoundsConfig(input_lower=[-4.0, -0.3], input_upper=[4.0, 0.3], rate=[1.0, 0.2])


def _vehicle(robot_id, x, y, v, reference, box):
    return RobotConfig(
        id=robot_id,
        model="bicycle",
        shape=ShapeConfig(kind="box", h=4.5, w=1.8),
        initial_state=[x, y, 0.0, v],
        reference=reference,
        weights=WeightsConfig(q_z=[0.0, 0.5, 2.0, 1.0], q_u=[0.1, 5.0], q_du=[0.5, 20.0]),
        bounds=_bicycle_bounds(),
        state_box=box,
    )


def _reference(rows):
    """Waypoint reference from (time, y, psi, v) rows; x is not tracked"""
    return ReferenceConfig(waypoints=[WaypointConfig(time=t, state=[0.0, y, psi, v]) for t, y, psi, v in rows])


def lane_change_rows(y_from, y_to, start, end, v, ramp=0.5):
    """Hold the lane until `start`, then a straight lateral ramp reaching `y_to` at `end`"""
    rate = (y_to - y_from) / (end - start)
    psi = round(math.atan2(y_to - y_from, v * (end - start)), 3)
    return [
        (0.0, y_from, 0.0, v),
        (start, y_from, 0.0, v),
        (start + ramp, round(y_from + rate * ramp, 3), psi, v),
        (end - ramp, round(y_to - rate * ramp, 3), psi, v),
        (end, y_to, 0.0, v),
    ]


def platoon_references(v_ref=15.0):
    """
    Merge schedule: vehicle 2 eases off to open a gap behind vehicle 1, which
    leaves the middle lane once the gap is there; vehicle 3 crosses two lanes
    into the space in front of vehicle 0.
    """
    lane_1 = LANE_CENTERS[0]
    return [
        ReferenceConfig(goal=[0.0, lane_1, 0.0, v_ref]),
        _reference(lane_change_rows(LANE_CENTERS[1], lane_1, 2.0, 5.5, v_ref)),
        _reference([(0.0, lane_1, 0.0, v_ref), (1.0, lane_1, 0.0, v_ref - 0.5),
                    (2.0, lane_1, 0.0, v_ref - 0.5), (3.0, lane_1, 0.0, v_ref)]),
        _reference(lane_change_rows(LANE_CENTERS[2], lane_1, 0.5, 7.0, v_ref)),
    ]


def builtin_platoon(n_vehicles=4, steps=200):
    """Vehicles on a three-lane road merging into the lowest lane; 2 and 3 use the first vehicles of the 4-car layout"""
    if n_vehicles not in (2, 3, 4):
        raise ScenarioError(f"Platoon scenarios exist for 2, 3 or 4 vehicles, got {n_vehicles}", ["n_vehicles"])
    v_ref = 15.0
    box = StateBoxConfig(x=(-10.0, 260.0), y=(0.0, 3 * LANE_WIDTH), psi=(-0.6, 0.6))
    references = platoon_references(v_ref)
    robots = [
        _vehicle(k, PLATOON_X0[k], PLATOON_Y0[k], v_ref, references[k], box)
        for k in range(n_vehicles)
    ]
    return ScenarioConfig(name=f"platoon{n_vehicles}", robots=robots, d_min=0.5, dt=0.05, horizon=15,
                          steps=steps)


HETERO_SHAPES = (
    ShapeConfig(kind="box", h=0.8, w=0.8),
    ShapeConfig(kind="vertices", vertices=[(0.45 * math.cos(k * math.pi / 3), 0.45 * math.sin(k * math.pi / 3))
                                           for k in range(6)]),
    ShapeConfig(kind="vertices", vertices=[(0.5, 0.0), (0.15, 0.4), (-0.35, 0.3), (-0.4, -0.2), (0.1, -0.4)]),
    ShapeConfig(kind="vertices", vertices=[(0.4 * math.cos(math.pi / 6 + k * math.pi / 3),
                                            0.4 * math.sin(math.pi / 6 + k * math.pi / 3)) for k in range(6)]),
    ShapeConfig(kind="vertices", vertices=[(0.5, 0.0), (-0.3, 0.4), (-0.3, -0.4)]),
    ShapeConfig(kind="vertices", vertices=[(0.45 * math.cos(2 * k * math.pi / 5), 0.45 * math.sin(2 * k * math.pi / 5))
                                           for k in range(5)]),
)


def swap_waypoints(start, goal, depart, offset=0.7, legs=(3.5, 3.0, 3.5)):
    """
    Keep-right crossing: hold until `depart`, shift `offset` to the right of
    the straight line through the middle section, then settle on the goal.
    """
    start, goal = np.asarray(start, dtype=float), np.asarray(goal, dtype=float)
    span = np.linalg.norm(goal - start)
    u = (goal - start) / span
    right = np.array([u[1], -u[0]])
    heading = math.atan2(u[1], u[0])
    points = [start, start + 0.3 * span * u + offset * right, start + 0.7 * span * u + offset * right, goal]
    times = np.cumsum([depart, *legs])
    rows = [(0.0, start)] if depart > 0 else []
    rows += list(zip(times, points))
    return ReferenceConfig(waypoints=[WaypointConfig(time=round(float(t), 6),
                                                     state=[round(float(p[0]), 6), round(float(p[1]), 6), heading])
                                      for t, p in rows])


def builtin_hetero_swap(radius=5.0, steps=500, stagger=4.0):
    """
    Six unicycles of different shapes on a circle, each driving to the antipodal
    point. Diametral pairs depart `stagger` seconds apart and pass keeping right.
    """
    robots = []
    positions = [(radius * math.cos(k * math.pi / 3), radius * math.sin(k * math.pi / 3)) for k in range(6)]
    for k, shape in enumerate(HETERO_SHAPES):
        x, y = positions[k]
        goal = positions[(k + 3) % 6]
        heading = math.atan2(goal[1] - y, goal[0] - x)
        robots.append(RobotConfig(
            id=k,
            model="unicycle",
            shape=shape,
            initial_state=[x, y, heading],
            reference=swap_waypoints((x, y), goal, depart=stagger * (k % 3)),
            weights=WeightsConfig(q_z=[1.0, 1.0, 0.0], q_u=[0.05, 0.05], q_du=[0.5, 0.5]),
            bounds=BoundsConfig(input_lower=[-4.0, -2.0], input_upper=[4.0, 2.0], rate=[0.5, 0.5]),
            state_box=StateBoxConfig(x=(-radius - 1, radius + 1), y=(-radius - 1, radius + 1),
                                     psi=(-math.pi, math.pi)),
        ))
    return ScenarioConfig(name="hetero_swap", robots=robots, d_min=0.1, dt=0.05, horizon=30, steps=steps)


def builtin_overtake(gap=10.0, steps=160):
    """Fast car in the middle lane passes a slower car and merges in front of it"""
    fast, slow = 16.0, 12.0
    lane_1, lane_2 = LANE_CENTERS[0], LANE_CENTERS[1]
    box = StateBoxConfig(x=(-10.0, 200.0), y=(0.0, 2 * LANE_WIDTH), psi=(-0.6, 0.6))
    merge = _reference([(0.0, lane_2, 0.0, fast), (3.5, lane_2, 0.0, fast), (5.5, lane_1, 0.0, fast),
                        (steps * 0.05 + 10.0, lane_1, 0.0, fast)])
    robots = [
        _vehicle(0, 0.0, lane_2, fast, merge, box),
        _vehicle(1, gap, lane_1, slow, ReferenceConfig(goal=[0.0, lane_1, 0.0, slow]), box),
    ]
    return ScenarioConfig(name="overtake", robots=robots, d_min=0.5, dt=0.05, horizon=15, steps=steps,
                          trace_error_bound=True)


BUILTIN_SCENARIOS = {
    "platoon2": lambda: builtin_platoon(2),
    "platoon3": lambda: builtin_platoon(3),
    "platoon4": lambda: builtin_platoon(4),
    "hetero_swap": builtin_hetero_swap,
    "overtake": builtin_overtake,
}


def _error_paths(error):
    return [".".join(str(part) for part in item["loc"]) for item in error.errors()]


def parse_scenario(data):
    """Validate a decoded JSON document"""
    try:
        return ScenarioConfig.model_validate(data)
    except ValidationError as e:
        paths = _error_paths(e)
        details = "; ".join(f"{path}: {item['msg']}" for path, item in zip(paths, e.errors()))
        raise ScenarioError(f"Invalid scenario: {details}", paths) from e


def load_scenario(name_or_path):
    """Builtin name, path to a JSON file, or a file name inside the scenario directory"""
    if name_or_path in BUILTIN_SCENARIOS:
        return BUILTIN_SCENARIOS[name_or_path]()

    candidates = [name_or_path, os.path.join(settings.SCENARIO_DIR, name_or_path),
                  os.path.join(settings.SCENARIO_DIR, f"{name_or_path}.json")]
    path = next((candidate for candidate in candidates if os.path.isfile(candidate)), None)
    if path is None:
        raise ScenarioError(f"Unknown scenario '{name_or_path}'", ["scenario"])

    try:
        with open(path, 'r') as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ScenarioError(f"Could not parse {path}: {e}", ["scenario"]) from e
    logger.debug(f"Loaded scenario file {path}")
    return parse_scenario(data)


def save_scenario(config, path):
    with open(path, 'w') as f:
        f.write(config.model_dump_json(indent=2))
    return path


def validate_world(config):
    """Build the runtime objects once so geometry problems surface as config errors"""
    try:
        return config.build_world()
    except DistNmpcError as e:
        raise ScenarioError(f"Scenario '{config.name}' cannot be built: {e}", ["robots"]) from e
