"""Ambient agents: the social-reactive policy, ORCA, and episode simulation.

Datasets hold agents-only episodes: no system is present, so the agent
distribution is independent of any controller.  In closed-loop episodes
the agents may additionally perceive the system as one more neighbor
(``agents_react_to_system``), which introduces a mild, measurable shift.
With the flag off, agent trajectories are precomputed and replayed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .exceptions import EpisodeAbortedError, InvalidInputError
from .records import EpisodeMetrics, TrajectoryRecord, episode_metrics
from .world import (
    ControlInput,
    Scenario,
    ScenarioConfig,
    SystemState,
    clamp_input,
    initial_system_state,
    sample_scenario,
    step_dynamics,
)

EPS = 1e-12


@dataclass
class AgentModel:
    position: np.ndarray
    velocity: np.ndarray
    goal: np.ndarray
    radius: float = 0.5
    pref_speed: float = 1.0
    policy_kind: str = "social"


@dataclass(frozen=True)
class HalfPlane:
    """``{v : normal . (v - point) >= 0}`` in velocity space."""

    point: np.ndarray
    normal: np.ndarray

    def slack(self, v) -> float:
        return float(np.dot(self.normal, np.asarray(v) - self.point))

    @property
    def direction(self) -> np.ndarray:
        # feasible side lies to the left of the direction vector
        return np.array([self.normal[1], -self.normal[0]])


@dataclass(frozen=True)
class SocialParams:
    sensing_radius: float = 3.0
    gain: float = 1.0
    length_scale: float = 0.5
    left_bias: float = 1.0
    slow_radius: float = 1.0


def preferred_velocity(position, goal, pref_speed, slow_radius=1.0) -> np.ndarray:
    """Goal-directed velocity at ``pref_speed``, ramping down inside ``slow_radius``."""
    dx, dy = goal[0] - position[0], goal[1] - position[1]
    scale = pref_speed / max(math.hypot(dx, dy), slow_radius)
    return np.array([dx * scale, dy * scale])


def social_reactive_velocity(
    agent: AgentModel,
    neighbors: Sequence[AgentModel],
    params: SocialParams = SocialParams(),
) -> np.ndarray:
    """Goal attraction plus tapered exponential repulsion from nearby agents.

    Neighbors ahead also push the agent towards its own left, which breaks
    head-on symmetry deterministically.  The result is clipped to
    ``pref_speed``.
    """
    px, py = float(agent.position[0]), float(agent.position[1])
    vx, vy = preferred_velocity(agent.position, agent.goal, agent.pref_speed, params.slow_radius)
    gx, gy = agent.goal[0] - px, agent.goal[1] - py
    gd = math.hypot(gx, gy)
    dirx, diry = (gx / gd, gy / gd) if gd > EPS else (0.0, 0.0)
    leftx, lefty = -diry, dirx
    for nb in neighbors:
        rx, ry = px - nb.position[0], py - nb.position[1]
        dist = math.hypot(rx, ry)
        if dist >= params.sensing_radius:
            continue
        rsum = agent.radius + nb.radius
        clearance = max(dist - rsum, 0.0)
        w = params.gain * (
            math.exp(-clearance / params.length_scale)
            - math.exp(-max(params.sensing_radius - rsum, 0.0) / params.length_scale)
        )
        if w <= 0.0:
            continue
        if dist > EPS:
            ax, ay = rx / dist, ry / dist
        else:
            ax, ay = 0.0, 0.0
        ahead = max(0.0, -(ax * dirx + ay * diry))
        vx += w * (ax + params.left_bias * ahead * leftx)
        vy += w * (ay + params.left_bias * ahead * lefty)
    speed = math.hypot(vx, vy)
    if speed > agent.pref_speed:
        vx *= agent.pref_speed / speed
        vy *= agent.pref_speed / speed
    return np.array([vx, vy])


# -- ORCA --------------------------------------------------------------------


def _det(a, b):
    return a[0] * b[1] - a[1] * b[0]


def orca_halfplanes(
    agent: AgentModel, neighbors: Sequence[AgentModel], time_horizon: float, dt: float,
    responsibility: float = 0.5,
) -> list:
    """One half-plane per neighbor from the truncated velocity obstacle."""
    planes = []
    inv_tau = 1.0 / time_horizon
    vel = np.asarray(agent.velocity, dtype=float)
    for nb in neighbors:
        rel_pos = np.asarray(nb.position, dtype=float) - agent.position
        rel_vel = vel - nb.velocity
        dist_sq = float(rel_pos @ rel_pos)
        r = agent.radius + nb.radius
        r_sq = r * r
        if dist_sq > r_sq:
            w = rel_vel - inv_tau * rel_pos
            w_len_sq = float(w @ w)
            dot1 = float(w @ rel_pos)
            if dot1 < 0.0 and dot1 * dot1 > r_sq * w_len_sq:
                # closest boundary point lies on the cut-off circle
                w_len = math.sqrt(w_len_sq)
                unit_w = w / w_len
                direction = np.array([unit_w[1], -unit_w[0]])
                u = (r * inv_tau - w_len) * unit_w
            else:
                leg = math.sqrt(dist_sq - r_sq)
                if _det(rel_pos, w) > 0.0:
                    direction = np.array(
                        [rel_pos[0] * leg - rel_pos[1] * r, rel_pos[0] * r + rel_pos[1] * leg]
                    ) / dist_sq
                else:
                    direction = -np.array(
                        [rel_pos[0] * leg + rel_pos[1] * r, -rel_pos[0] * r + rel_pos[1] * leg]
                    ) / dist_sq
                u = float(rel_vel @ direction) * direction - rel_vel
        else:
            # already overlapping: resolve within one step
            inv_dt = 1.0 / dt
            w = rel_vel - inv_dt * rel_pos
            w_len = math.sqrt(float(w @ w))
            unit_w = w / w_len if w_len > EPS else np.array([1.0, 0.0])
            direction = np.array([unit_w[1], -unit_w[0]])
            u = (r * inv_dt - w_len) * unit_w
        planes.append(
            HalfPlane(point=vel + responsibility * u, normal=np.array([-direction[1], direction[0]]))
        )
    return planes


def _lp1(lines, i, radius, opt, direction_opt, result):
    point, direction = lines[i]
    dot = float(point @ direction)
    disc = dot * dot + radius * radius - float(point @ point)
    if disc < 0.0:
        return False
    sq = math.sqrt(disc)
    t_left, t_right = -dot - sq, -dot + sq
    for j in range(i):
        pj, dj = lines[j]
        denom = _det(direction, dj)
        numer = _det(dj, point - pj)
        if abs(denom) <= EPS:
            if numer < 0.0:
                return False
            continue
        t = numer / denom
        if denom >= 0.0:
            t_right = min(t_right, t)
        else:
            t_left = max(t_left, t)
        if t_left > t_right:
            return False
    if direction_opt:
        t = t_right if float(opt @ direction) > 0.0 else t_left
    else:
        t = min(max(float(direction @ (opt - point)), t_left), t_right)
    result[:] = point + t * direction
    return True


def _lp2(lines, radius, opt, direction_opt, result):
    if direction_opt:
        result[:] = opt * radius
    elif float(opt @ opt) > radius * radius:
        result[:] = opt / math.sqrt(float(opt @ opt)) * radius
    else:
        result[:] = opt
    for i, (point, direction) in enumerate(lines):
        if _det(direction, point - result) > 0.0:
            saved = result.copy()
            if not _lp1(lines, i, radius, opt, direction_opt, result):
                result[:] = saved
                return i
    return len(lines)


def _lp3(lines, begin, radius, result):
    distance = 0.0
    for i in range(begin, len(lines)):
        pi, di = lines[i]
        if _det(di, pi - result) > distance:
            proj = []
            for j in range(i):
                pj, dj = lines[j]
                determinant = _det(di, dj)
                if abs(determinant) <= EPS:
                    if float(di @ dj) > 0.0:
                        continue
                    point = 0.5 * (pi + pj)
                else:
                    point = pi + (_det(dj, pi - pj) / determinant) * di
                d = dj - di
                proj.append((point, d / math.sqrt(float(d @ d))))
            saved = result.copy()
            if _lp2(proj, radius, np.array([-di[1], di[0]]), True, result) < len(proj):
                result[:] = saved
            distance = _det(di, pi - result)


def solve_velocity_lp(planes: Sequence[HalfPlane], max_speed: float, pref_velocity) -> tuple:
    """Velocity closest to ``pref_velocity`` inside all half-planes and the speed disc.

    Returns ``(velocity, feasible)``.  When the program is infeasible the
    velocity minimizing the largest constraint violation is returned.
    """
    lines = [(np.asarray(p.point, dtype=float), p.direction) for p in planes]
    result = np.zeros(2)
    opt = np.asarray(pref_velocity, dtype=float)
    fail = _lp2(lines, max_speed, opt, False, result)
    if fail < len(lines):
        _lp3(lines, fail, max_speed, result)
        return result, False
    return result, True


def orca_velocity(
    agent: AgentModel,
    neighbors: Sequence[AgentModel],
    time_horizon: float = 2.0,
    dt: float = 0.1,
    max_speed: float | None = None,
    pref_velocity=None,
    responsibility: float = 0.5,
) -> np.ndarray:
    for nb in neighbors:
        if np.array_equal(nb.position, agent.position):
            raise InvalidInputError("ORCA needs strictly positive pairwise distances")
    max_speed = agent.pref_speed if max_speed is None else max_speed
    if pref_velocity is None:
        pref_velocity = preferred_velocity(agent.position, agent.goal, agent.pref_speed)
    pref_velocity = np.asarray(pref_velocity, dtype=float)
    if not neighbors:
        return pref_velocity.copy()
    planes = orca_halfplanes(agent, neighbors, time_horizon, dt, responsibility)
    velocity, _ = solve_velocity_lp(planes, max_speed, pref_velocity)
    return velocity


# -- ambient simulation ------------------------------------------------------


class AmbientCrowd:
    """Steppable ambient agents.

    ``step(system=None)`` advances every agent by one ``dt``.  When a
    ``system`` :class:`AgentModel` is passed it is perceived like any other
    neighbor (agents react to it but it is not moved here).  Goal switches
    (when ``retarget_prob > 0``) draw from a stream derived from
    ``rng_seed`` so the scenario sampler's stream is left untouched.
    """

    def __init__(self, config: ScenarioConfig, starts: np.ndarray, goals: np.ndarray, rng_seed):
        self.config = config
        self.agents = [
            AgentModel(
                position=np.asarray(starts[i], dtype=float).copy(),
                velocity=np.zeros(2),
                goal=np.asarray(goals[i], dtype=float).copy(),
                radius=config.agent_radius,
                pref_speed=config.agent_pref_speed,
                policy_kind=config.agent_policy,
            )
            for i in range(len(starts))
        ]
        self.rng = np.random.default_rng(np.random.SeedSequence([int(rng_seed) % 2**63, 1]))

    @property
    def positions(self) -> np.ndarray:
        return np.array([a.position for a in self.agents]).reshape(len(self.agents), 2)

    @property
    def goals(self) -> np.ndarray:
        return np.array([a.goal for a in self.agents]).reshape(len(self.agents), 2)

    def step(self, system: AgentModel = None) -> np.ndarray:
        cfg = self.config
        if cfg.retarget_prob > 0.0:
            hw = cfg.workspace_half_width - cfg.agent_radius
            for a in self.agents:
                if self.rng.random() < cfg.retarget_prob:
                    a.goal = self.rng.uniform(-hw, hw, size=2)
        extra = [] if system is None else [system]
        new_vel = []
        for i, a in enumerate(self.agents):
            others = self.agents[:i] + self.agents[i + 1 :] + extra
            if a.policy_kind == "orca":
                v = orca_velocity(a, others, time_horizon=2.0, dt=cfg.dt)
            else:
                v = social_reactive_velocity(a, others)
            new_vel.append(v)
        for a, v in zip(self.agents, new_vel):
            a.velocity = v
            a.position = a.position + v * cfg.dt
        return self.positions


def simulate_agents(
    config: ScenarioConfig, starts: np.ndarray, goals: np.ndarray, n_steps: int, rng_seed
) -> tuple:
    """Roll all ambient agents forward ``n_steps`` without a system present.

    Returns ``(positions (n_steps + 1, m, 2), final goals)``.
    """
    crowd = AmbientCrowd(config, starts, goals, rng_seed)
    positions = np.empty((n_steps + 1, len(crowd.agents), 2))
    positions[0] = crowd.positions
    for t in range(n_steps):
        positions[t + 1] = crowd.step()
    return positions, crowd.goals


def episode_seed(master_seed: int, index: int, stream: int = 0) -> int:
    """Deterministic 63-bit seed for episode ``index`` of ``stream``."""
    ss = np.random.SeedSequence([int(master_seed) % 2**63, stream, index])
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def agent_episode(config: ScenarioConfig, seed: int) -> TrajectoryRecord:
    """Agents-only episode of ``horizon_T`` steps (no ego vehicle)."""
    sc = sample_scenario(config, seed)
    positions, goals = simulate_agents(config, sc.agent_starts, sc.agent_goals, config.horizon_T, seed)
    return TrajectoryRecord(
        seed=seed,
        dt=config.dt,
        agent_positions=positions,
        agent_goals=goals,
        agent_radius=config.agent_radius,
        system_start=sc.system_start,
        system_goal=sc.system_goal,
    )


# -- closed loop -------------------------------------------------------------

# A controller maps (ego state, agent history (t+1, m, 2), ego goal) to an input.
Controller = Callable[[SystemState, np.ndarray, np.ndarray], ControlInput]


def _closed_loop(config: ScenarioConfig, controller: Controller, sc: Scenario, seed, advance) -> tuple:
    # advance(t, state) -> agent positions at t + 1, given the system state at t
    state = initial_system_state(sc)
    goal = np.asarray(sc.system_goal, dtype=float)
    agents = [np.asarray(sc.agent_starts, dtype=float).reshape(-1, 2)]
    states = [state.as_array()]
    reached = None
    t = 0
    while True:
        xy = states[-1][:2]
        if agents[t].shape[0] and np.min(np.linalg.norm(agents[t] - xy, axis=1)) < config.collision_distance:
            break
        if math.hypot(goal[0] - xy[0], goal[1] - xy[1]) <= config.goal_tolerance:
            reached = t
            break
        if t >= config.horizon_T:
            break
        u = controller(state, np.array(agents), goal)
        if not (math.isfinite(u.accel) and math.isfinite(u.steer)):
            raise EpisodeAbortedError(f"controller returned non-finite input {u} at step {t} (seed={seed})")
        agents.append(advance(t, state))
        state = step_dynamics(state, clamp_input(u, config.vehicle), config.dt, config.vehicle)
        states.append(state.as_array())
        t += 1
    states = np.array(states)
    agents = np.array(agents)
    metrics = episode_metrics(states[:, :2], agents, reached, config.collision_distance, config.horizon_T, config.dt)
    return states, agents, metrics


def replay_episode(
    config: ScenarioConfig, controller: Controller, record: TrajectoryRecord
) -> tuple:
    """Drive the system through a recorded agents-only episode under ``controller``.

    The agents follow the recording regardless of the system.  Stops on goal
    arrival or on the first collision.
    """
    sc = Scenario(record.system_start, record.system_goal, record.agent_positions[0], record.agent_goals)
    recorded = record.agent_positions
    states, agents, metrics = _closed_loop(config, controller, sc, record.seed, lambda t, s: recorded[t + 1])
    out = TrajectoryRecord(
        seed=record.seed,
        dt=record.dt,
        agent_positions=agents,
        agent_goals=record.agent_goals,
        agent_radius=record.agent_radius,
        system_start=record.system_start,
        system_goal=record.system_goal,
        system_states=states,
    )
    return out, metrics


def rollout_episode(config: ScenarioConfig, system_controller: Controller, rng_seed) -> tuple:
    """Sample a scenario and run the system controller among the agents.

    With ``config.agents_react_to_system`` the agents are stepped jointly
    with the system and perceive it as a neighbor; otherwise the agents-only
    episode for ``rng_seed`` is replayed.  Returns ``(TrajectoryRecord,
    EpisodeMetrics)``.
    """
    if not config.agents_react_to_system:
        return replay_episode(config, system_controller, agent_episode(config, rng_seed))
    sc = sample_scenario(config, rng_seed)
    crowd = AmbientCrowd(config, sc.agent_starts, sc.agent_goals, rng_seed)

    def advance(t, state):
        heading = np.array([math.cos(state.heading), math.sin(state.heading)])
        system = AgentModel(state.position, state.speed * heading, np.asarray(sc.system_goal, dtype=float),
                            radius=config.system_radius + config.system_berth, pref_speed=config.vehicle.v_max)
        return crowd.step(system)

    states, agents, metrics = _closed_loop(config, system_controller, sc, rng_seed, advance)
    out = TrajectoryRecord(
        seed=rng_seed,
        dt=config.dt,
        agent_positions=agents,
        agent_goals=crowd.goals,
        agent_radius=config.agent_radius,
        system_start=sc.system_start,
        system_goal=sc.system_goal,
        system_states=states,
    )
    return out, metrics


# -- datasets ----------------------------------------------------------------


def split_sizes(n_episodes: int, fractions=(1 / 3, 1 / 3, 1 / 3), cal_count: int = 0) -> tuple:
    """Sizes of (predictor-train, filter-train, calibration) sets.

    ``fractions`` partition ``n_episodes``; ``cal_count`` extra calibration
    episodes are appended on top.  Rounding leftovers go to the last nonzero
    fraction.
    """
    fr = np.asarray(fractions, dtype=float)
    if fr.shape != (3,) or np.any(fr < 0) or not math.isclose(fr.sum(), 1.0, abs_tol=1e-9):
        raise InvalidInputError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    sizes = [int(math.floor(n_episodes * f + 1e-9)) for f in fr]
    last = max(i for i in range(3) if fr[i] > 0)
    sizes[last] += n_episodes - sum(sizes)
    sizes[2] += cal_count
    return tuple(sizes)


def generate_dataset(
    config: ScenarioConfig,
    n_episodes: int,
    fractions=(1 / 3, 1 / 3, 1 / 3),
    rng_seed: int = 0,
    cal_count: int = 0,
) -> tuple:
    """Independent agents-only episodes split into (D_Ytrain, D_train, D_cal).

    Episode ``i`` is seeded from ``(rng_seed, i)`` alone, so the episodes can
    be produced in any order (or in parallel) with identical results.
    """
    sizes = split_sizes(n_episodes, fractions, cal_count)
    total = sum(sizes)
    episodes = [agent_episode(config, episode_seed(rng_seed, i)) for i in range(total)]
    a, b = sizes[0], sizes[0] + sizes[1]
    return episodes[:a], episodes[a:b], episodes[b:]
