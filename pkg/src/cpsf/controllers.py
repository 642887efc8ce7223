"""Ego-vehicle policies.

A *policy* maps ``(state, agent_positions, agent_velocities, goal)`` to a
:class:`ControlInput`; this is the nominal controller that the safety
filter imitates.  Both nominal policies here are velocity-level planners
followed by a proportional tracker that turns a desired planar velocity
into (acceleration, steering) for the bicycle.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .agents import AgentModel, orca_velocity
from .world import ControlInput, SystemState, VehicleParams, clamp_input

_WRAP = 2.0 * math.pi


@dataclass(frozen=True)
class VelocityTracker:
    speed_gain: float = 2.0
    heading_gain: float = 2.5
    min_speed: float = 0.5

    def __call__(self, state: SystemState, v_des, params: VehicleParams) -> ControlInput:
        vx, vy = float(v_des[0]), float(v_des[1])
        target_speed = math.hypot(vx, vy)
        if target_speed > 1e-9:
            err = math.atan2(vy, vx) - state.heading
            err -= _WRAP * math.ceil((err - math.pi) / _WRAP)
        else:
            err = 0.0
        # only drive forward as fast as the heading error allows
        speed_ref = min(target_speed * max(0.0, math.cos(err)), params.v_max)
        accel = self.speed_gain * (speed_ref - state.speed)
        omega = self.heading_gain * err
        steer = math.atan2(omega * params.wheelbase, max(state.speed, self.min_speed))
        return clamp_input(ControlInput(accel, steer), params)


class NominalPolicy:
    """Base class; subclasses implement :meth:`desired_velocity`."""

    name = "nominal"

    def __init__(self, vehicle: VehicleParams = VehicleParams(), tracker=VelocityTracker()):
        self.vehicle = vehicle
        self.tracker = tracker

    def desired_velocity(self, state, positions, velocities, goal) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, state, positions, velocities, goal) -> ControlInput:
        v = self.desired_velocity(state, np.asarray(positions), np.asarray(velocities), np.asarray(goal))
        return self.tracker(state, v, self.vehicle)


class AggressivePolicy(NominalPolicy):
    """Goal-greedy reactive policy standing in for a pre-trained RL controller.

    Drives straight at the goal at full speed and only reacts to agents that
    are already within ``react_radius``, with a weak lateral push.  It is
    fast and collides regularly in dense traffic.
    """

    name = "aggressive"

    def __init__(self, vehicle=VehicleParams(), tracker=VelocityTracker(),
                 react_radius=1.5, react_gain=0.6, goal_gain=2.0):
        super().__init__(vehicle, tracker)
        self.react_radius = react_radius
        self.react_gain = react_gain
        self.goal_gain = goal_gain

    def desired_velocity(self, state, positions, velocities, goal):
        px, py = state.pos_x, state.pos_y
        dx, dy = goal[0] - px, goal[1] - py
        dist = math.hypot(dx, dy)
        speed = min(self.vehicle.v_max, self.goal_gain * dist)
        v = np.array([dx, dy]) * (speed / dist) if dist > 1e-9 else np.zeros(2)
        for q in positions:
            rx, ry = px - q[0], py - q[1]
            d = math.hypot(rx, ry)
            if 1e-9 < d < self.react_radius:
                push = self.react_gain * self.vehicle.v_max * (1.0 - d / self.react_radius)
                v = v + push * np.array([rx, ry]) / d
        return v


class OrcaPolicy(NominalPolicy):
    """ORCA for the ego: conservative, inflated radius, reciprocity 1/2."""

    name = "orca"

    def __init__(self, vehicle=VehicleParams(), tracker=VelocityTracker(), radius=0.5,
                 agent_radius=0.5, safety_margin=0.3, time_horizon=2.0, dt=0.1, pref_speed=None):
        super().__init__(vehicle, tracker)
        self.radius = radius
        self.agent_radius = agent_radius
        self.safety_margin = safety_margin
        self.time_horizon = time_horizon
        self.dt = dt
        self.pref_speed = vehicle.v_max if pref_speed is None else pref_speed

    def desired_velocity(self, state, positions, velocities, goal):
        heading = np.array([math.cos(state.heading), math.sin(state.heading)])
        me = AgentModel(
            position=np.array([state.pos_x, state.pos_y]),
            velocity=state.speed * heading,
            goal=goal,
            radius=self.radius + self.safety_margin,
            pref_speed=self.pref_speed,
            policy_kind="orca",
        )
        dx, dy = goal[0] - me.position[0], goal[1] - me.position[1]
        dist = math.hypot(dx, dy)
        speed = min(self.pref_speed, 2.0 * dist)
        pref = np.array([dx, dy]) * (speed / dist) if dist > 1e-9 else np.zeros(2)
        neighbors = [
            AgentModel(position=np.asarray(q, dtype=float), velocity=np.asarray(v, dtype=float),
                       goal=np.asarray(q, dtype=float), radius=self.agent_radius)
            for q, v in zip(positions, velocities)
            if not np.array_equal(q, me.position)
        ]
        return orca_velocity(me, neighbors, self.time_horizon, self.dt,
                             max_speed=self.vehicle.v_max, pref_velocity=pref)


class StandStill(NominalPolicy):
    name = "stand_still"

    def desired_velocity(self, state, positions, velocities, goal):
        return np.zeros(2)


def zero_input_policy(state, positions, velocities, goal) -> ControlInput:
    return ControlInput(0.0, 0.0)


def agent_velocities(history: np.ndarray, dt: float) -> np.ndarray:
    """Finite-difference velocities of the last snapshot in ``history``."""
    if history.shape[0] < 2:
        return np.zeros_like(history[-1])
    return (history[-1] - history[-2]) / dt


def as_controller(policy, dt: float):
    """Lift a snapshot policy to a history-based rollout controller."""

    def controller(state, history, goal):
        return policy(state, history[-1], agent_velocities(history, dt), goal)

    controller.policy = policy
    return controller


def make_policy(name: str, config) -> NominalPolicy:
    if name == "aggressive":
        return AggressivePolicy(config.vehicle)
    if name == "orca":
        return OrcaPolicy(config.vehicle, radius=config.system_radius,
                          agent_radius=config.agent_radius, dt=config.dt)
    if name == "stand_still":
        return StandStill(config.vehicle)
    raise ValueError(f"unknown nominal policy {name!r}")
