"""Episode records, per-episode metrics and their JSON forms."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

SCHEMA_VERSION = 1


@dataclass
class TrajectoryRecord:
    """One episode: agent positions per step and, optionally, the ego states."""

    seed: int
    dt: float
    agent_positions: np.ndarray  # (steps + 1, m, 2)
    agent_goals: np.ndarray  # (m, 2)
    agent_radius: float
    system_start: Optional[np.ndarray] = None
    system_goal: Optional[np.ndarray] = None
    system_states: Optional[np.ndarray] = None  # (steps + 1, 4)

    @property
    def num_agents(self) -> int:
        return self.agent_positions.shape[1]

    @property
    def num_steps(self) -> int:
        return self.agent_positions.shape[0] - 1

    def to_json(self) -> str:
        obj = {
            "schema_version": SCHEMA_VERSION,
            "seed": int(self.seed),
            "num_agents": self.num_agents,
            "dt": self.dt,
            "steps": self.agent_positions.tolist(),
            "goals": self.agent_goals.tolist(),
            "radii": [self.agent_radius] * self.num_agents,
        }
        if self.system_start is not None:
            obj["system_start"] = np.asarray(self.system_start).tolist()
            obj["system_goal"] = np.asarray(self.system_goal).tolist()
        if self.system_states is not None:
            obj["system_states"] = self.system_states.tolist()
        return json.dumps(obj, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "TrajectoryRecord":
        obj = json.loads(line)
        m = obj["num_agents"]
        steps = np.array(obj["steps"], dtype=np.float64).reshape(-1, m, 2)
        sys_states = obj.get("system_states")
        return cls(
            seed=obj["seed"],
            dt=obj["dt"],
            agent_positions=steps,
            agent_goals=np.array(obj["goals"], dtype=np.float64).reshape(m, 2),
            agent_radius=obj["radii"][0] if obj["radii"] else 0.5,
            system_start=None if "system_start" not in obj else np.array(obj["system_start"]),
            system_goal=None if "system_goal" not in obj else np.array(obj["system_goal"]),
            system_states=None if sys_states is None else np.array(sys_states).reshape(-1, 4),
        )


@dataclass
class EpisodeMetrics:
    """Outcome of one closed-loop episode.

    Exactly one of reached / collided / failed holds.  ``time_to_goal`` is
    ``T * dt`` for every episode that did not reach the goal.
    """

    collided: bool
    failed: bool
    min_agent_distance: float
    time_to_goal: float
    steps_taken: int

    @property
    def reached(self) -> bool:
        return not (self.collided or self.failed)


def episode_metrics(
    system_xy: np.ndarray,
    agent_positions: np.ndarray,
    reached_step: Optional[int],
    collision_distance: float,
    horizon_T: int,
    dt: float,
) -> EpisodeMetrics:
    """Metrics from an executed episode (arrays cover the steps actually run)."""
    if agent_positions.shape[1] > 0:
        d = np.linalg.norm(agent_positions - system_xy[:, None, :], axis=-1).min(axis=1)
        min_dist = float(d.min())
        collided = bool((d < collision_distance).any())
    else:
        min_dist = math.inf
        collided = False
    steps_taken = system_xy.shape[0] - 1
    reached = reached_step is not None and not collided
    return EpisodeMetrics(
        collided=collided,
        failed=not reached and not collided,
        min_agent_distance=min_dist,
        time_to_goal=reached_step * dt if reached else horizon_T * dt,
        steps_taken=steps_taken,
    )
