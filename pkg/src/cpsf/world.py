"""Ego-vehicle dynamics, input bounds and scenario sampling.

The ego system is a kinematic bicycle integrated with forward Euler at a
fixed step ``dt``.  Ambient agents are single integrators and live in
:mod:`cpsf.agents`; this module only decides where everyone starts and
where they are headed.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .exceptions import InvalidInputError, ScenarioInfeasibleError

TWO_PI = 2.0 * math.pi


def wrap_angle(angle):
    """Map an angle (scalar or array) into (-pi, pi]."""
    return angle - TWO_PI * np.ceil((angle - math.pi) / TWO_PI)


def _wrap_scalar(angle: float) -> float:
    return angle - TWO_PI * math.ceil((angle - math.pi) / TWO_PI)


@dataclass(frozen=True)
class VehicleParams:
    wheelbase: float = 1.0
    v_max: float = 2.0
    a_max: float = 2.0
    steer_max: float = 0.6


@dataclass(frozen=True)
class SystemState:
    pos_x: float
    pos_y: float
    heading: float
    speed: float

    def as_array(self) -> np.ndarray:
        return np.array([self.pos_x, self.pos_y, self.heading, self.speed])

    @classmethod
    def from_array(cls, arr) -> "SystemState":
        x, y, th, v = (float(a) for a in arr)
        return cls(x, y, th, v)

    @property
    def position(self) -> np.ndarray:
        return np.array([self.pos_x, self.pos_y])


@dataclass(frozen=True)
class ControlInput:
    accel: float
    steer: float

    def as_array(self) -> np.ndarray:
        return np.array([self.accel, self.steer])


@dataclass
class ScenarioConfig:
    """Everything needed to sample and simulate one episode.

    Only ``num_agents``, ``dt``, ``horizon_T``, the radii, ``goal_tolerance``,
    ``workspace_half_width`` and ``rng_seed`` are part of the core contract;
    the remaining knobs shape the sampler and the ambient motion.
    """

    num_agents: int = 4
    dt: float = 0.1
    horizon_T: int = 80
    agent_radius: float = 0.5
    system_radius: float = 0.5
    goal_tolerance: float = 0.3
    workspace_half_width: float = 6.0
    rng_seed: int = 0
    clearance: float = 0.2
    # agents never start closer than this to the ego start
    system_start_clearance: float = 2.0
    # and never aim closer than this to the ego goal (parked agents would
    # otherwise block it)
    system_goal_clearance: float = 2.0
    agent_pref_speed: float = 1.0
    agent_policy: str = "social"
    agent_min_travel: float = 3.0
    system_min_travel: float = 3.5
    system_max_travel: float = 4.5
    # per-step chance that an agent silently switches to a fresh random goal;
    # 0 disables (used to produce heavy-tailed prediction errors)
    retarget_prob: float = 0.0
    # in closed-loop episodes, ambient agents perceive the system as one
    # more neighbor; agents-only datasets are unaffected
    agents_react_to_system: bool = True
    # extra clearance the agents keep from the system beyond the radii
    system_berth: float = 0.0
    max_retries: int = 10_000
    vehicle: VehicleParams = field(default_factory=VehicleParams)

    def __post_init__(self):
        if isinstance(self.vehicle, dict):
            self.vehicle = VehicleParams(**self.vehicle)
        if not self.dt > 0:
            raise InvalidInputError(f"dt must be > 0, got {self.dt}")
        if self.horizon_T < 1:
            raise InvalidInputError(f"horizon_T must be >= 1, got {self.horizon_T}")
        if self.num_agents < 0:
            raise InvalidInputError(f"num_agents must be >= 0, got {self.num_agents}")
        if not (self.agent_radius > 0 and self.system_radius > 0):
            raise InvalidInputError("radii must be > 0")
        if self.agent_policy not in ("social", "orca"):
            raise InvalidInputError(f"unknown agent_policy {self.agent_policy!r}")

    @property
    def collision_distance(self) -> float:
        return self.agent_radius + self.system_radius

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "ScenarioConfig":
        return replace(self, **changes)


@dataclass(frozen=True)
class Scenario:
    system_start: np.ndarray
    system_goal: np.ndarray
    agent_starts: np.ndarray  # (m, 2)
    agent_goals: np.ndarray  # (m, 2)


def _check_finite(*values, what="value"):
    for v in values:
        if not math.isfinite(v):
            raise InvalidInputError(f"non-finite {what}: {values}")


def clamp_input(u: ControlInput, params: VehicleParams = VehicleParams()) -> ControlInput:
    _check_finite(u.accel, u.steer, what="control input")
    return ControlInput(
        min(max(u.accel, -params.a_max), params.a_max),
        min(max(u.steer, -params.steer_max), params.steer_max),
    )


def step_dynamics(
    state: SystemState,
    u: ControlInput,
    dt: float,
    params: VehicleParams = VehicleParams(),
) -> SystemState:
    """One forward-Euler step of the kinematic bicycle.

    Position and heading are advanced with the *current* speed, then the
    speed is updated and clipped to ``[0, v_max]``.
    """
    _check_finite(state.pos_x, state.pos_y, state.heading, state.speed, what="state")
    _check_finite(u.accel, u.steer, what="control input")
    if not dt > 0:
        raise InvalidInputError(f"dt must be > 0, got {dt}")
    if abs(u.accel) > params.a_max or abs(u.steer) > params.steer_max:
        raise InvalidInputError(f"control input {u} outside bounds; clamp_input first")
    v = state.speed
    return SystemState(
        state.pos_x + v * math.cos(state.heading) * dt,
        state.pos_y + v * math.sin(state.heading) * dt,
        _wrap_scalar(state.heading + (v / params.wheelbase) * math.tan(u.steer) * dt),
        min(max(v + u.accel * dt, 0.0), params.v_max),
    )


def scenario_rng(seed) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed))


def _sample_pair(rng, half_width, margin):
    # start in a random half of the square, goal in the opposite half
    lo, hi = -half_width + margin, half_width - margin
    axis = rng.integers(2)
    sign = 1.0 if rng.random() < 0.5 else -1.0
    start = rng.uniform(lo, hi, size=2)
    goal = rng.uniform(lo, hi, size=2)
    start[axis] = sign * abs(start[axis])
    goal[axis] = -sign * abs(goal[axis])
    return start, goal


def sample_scenario(config: ScenarioConfig, rng_seed=None) -> Scenario:
    """Draw system and agent start/goal pairs.

    Everyone starts in one half of the workspace and heads for the opposite
    half, which forces crossing traffic.  Starts (and goals) are kept at
    least ``2 * (agent_radius + clearance)`` apart by rejection.
    """
    seed = config.rng_seed if rng_seed is None else rng_seed
    rng = scenario_rng(seed)
    hw = config.workspace_half_width
    margin = max(config.agent_radius, config.system_radius)
    min_sep = 2.0 * (config.agent_radius + config.clearance)
    tries = 0

    def draw(accept):
        nonlocal tries
        while tries < config.max_retries:
            tries += 1
            s, g = _sample_pair(rng, hw, margin)
            if accept(s, g):
                return s, g
        raise ScenarioInfeasibleError(
            f"no valid scenario after {config.max_retries} draws (seed={seed})"
        )

    sys_start, sys_goal = draw(
        lambda s, g: config.system_min_travel
        <= np.hypot(*(g - s))
        <= config.system_max_travel
    )
    starts = [sys_start]
    goals = [sys_goal]

    def agent_ok(s, g):
        if np.hypot(*(g - s)) < config.agent_min_travel:
            return False
        if np.hypot(*(s - sys_start)) < max(min_sep, config.system_start_clearance):
            return False
        if np.hypot(*(g - sys_goal)) < max(min_sep, config.system_goal_clearance):
            return False
        for other in starts[1:]:
            if np.hypot(*(s - other)) < min_sep:
                return False
        for other in goals[1:]:
            if np.hypot(*(g - other)) < min_sep:
                return False
        return True

    for _ in range(config.num_agents):
        s, g = draw(agent_ok)
        starts.append(s)
        goals.append(g)
    return Scenario(
        system_start=sys_start,
        system_goal=sys_goal,
        agent_starts=np.array(starts[1:]).reshape(-1, 2),
        agent_goals=np.array(goals[1:]).reshape(-1, 2),
    )


def initial_system_state(scenario: Scenario) -> SystemState:
    """Ego at rest at its start, facing its goal."""
    d = scenario.system_goal - scenario.system_start
    return SystemState(
        float(scenario.system_start[0]),
        float(scenario.system_start[1]),
        math.atan2(d[1], d[0]),
        0.0,
    )
