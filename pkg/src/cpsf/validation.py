"""Input validation helpers shared by the estimators."""
from __future__ import annotations

import numpy as np

from .exceptions import InvalidInputError, ShapeError


def as_positions(episode) -> np.ndarray:
    """Agent positions (steps + 1, m, 2) from a record or a raw array."""
    pos = getattr(episode, "agent_positions", episode)
    return np.asarray(pos, dtype=np.float64)


def check_history(history, min_length=1) -> np.ndarray:
    h = as_positions(history)
    if h.ndim != 3 or h.shape[2] != 2:
        raise ShapeError(f"history must have shape (t+1, m, 2), got {h.shape}")
    if h.shape[0] < min_length:
        raise InvalidInputError(f"history needs at least {min_length} steps, got {h.shape[0]}")
    if not np.all(np.isfinite(h)):
        raise InvalidInputError("history contains non-finite positions")
    return h


def check_episodes(episodes, num_agents=None, min_steps=1) -> list:
    out = []
    for i, ep in enumerate(episodes):
        pos = check_history(ep)
        if num_agents is not None and pos.shape[1] != num_agents:
            raise ShapeError(f"episode {i} has {pos.shape[1]} agents, expected {num_agents}")
        if pos.shape[0] < min_steps + 1:
            raise InvalidInputError(
                f"episode {i} has {pos.shape[0] - 1} steps, needs at least {min_steps}"
            )
        out.append(pos)
    if not out:
        raise InvalidInputError("empty dataset")
    return out


def check_probability(value, name, low_open=True, high_open=True) -> float:
    v = float(value)
    lo_ok = v > 0 if low_open else v >= 0
    hi_ok = v < 1 if high_open else v <= 1
    if not (np.isfinite(v) and lo_ok and hi_ok):
        raise InvalidInputError(f"{name} must lie in (0, 1), got {value}")
    return v
