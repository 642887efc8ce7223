"""Paired-seed evaluation of closed-loop controllers."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..agents import episode_seed, rollout_episode
from ..exceptions import InvalidInputError
from ..records import EpisodeMetrics

REPORT_SCHEMA_VERSION = 1
CSV_COLUMNS = ("controller", "seed", "collided", "failed", "min_dist_m", "time_to_goal_s")


def evaluation_seeds(master: int, n: int, stream: int = 2) -> list:
    return [episode_seed(master, i, stream) for i in range(n)]


def aggregate(metrics) -> dict:
    """Table-style aggregates over a list of :class:`EpisodeMetrics`."""
    n = len(metrics)
    if n == 0:
        raise InvalidInputError("no episodes to aggregate")
    collisions = sum(m.collided for m in metrics)
    failures = sum(m.failed for m in metrics)
    reached = [m.time_to_goal for m in metrics if m.reached]
    dists = [m.min_agent_distance for m in metrics if math.isfinite(m.min_agent_distance)]
    return {
        "episodes": n,
        "collisions": collisions,
        "collision_pct": 100.0 * collisions / n,
        "failures": failures,
        "failure_pct": 100.0 * failures / n,
        "reached": len(reached),
        "mean_min_distance_m": float(np.mean(dists)) if dists else None,
        # over episodes that reached the goal; failures would add T * dt each
        "mean_time_to_goal_s": float(np.mean(reached)) if reached else None,
    }


@dataclass
class ExperimentReport:
    config_hash: str
    seeds: list
    controllers: dict  # name -> aggregate dict
    coverage: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "config_hash": self.config_hash,
            "n_episodes": len(self.seeds),
            "seeds": list(self.seeds),
            "controllers": self.controllers,
            "coverage": self.coverage,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentReport":
        return cls(d["config_hash"], list(d["seeds"]), d["controllers"], d.get("coverage", {}))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "ExperimentReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _fmt(x: float) -> str:
    return repr(float(x)) if math.isfinite(x) else "inf"


def metrics_to_csv(rows) -> str:
    """``rows``: iterable of (controller, seed, EpisodeMetrics)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for name, seed, m in rows:
        w.writerow([name, int(seed), int(m.collided), int(m.failed), _fmt(m.min_agent_distance), _fmt(m.time_to_goal)])
    return buf.getvalue()


def metrics_from_csv(text: str) -> list:
    r = csv.reader(io.StringIO(text))
    header = tuple(next(r))
    if header != CSV_COLUMNS:
        raise InvalidInputError(f"unexpected metrics CSV header {header}")
    rows = []
    for name, seed, col, fail, dist, ttg in r:
        m = EpisodeMetrics(bool(int(col)), bool(int(fail)), float(dist), float(ttg), -1)
        rows.append((name, int(seed), m))
    return rows


def report_from_rows(rows, config_hash: str, coverage=None) -> ExperimentReport:
    by_name, seeds = {}, {}
    for name, seed, m in rows:
        by_name.setdefault(name, []).append(m)
        seeds.setdefault(name, []).append(seed)
    lists = list(seeds.values())
    if any(s != lists[0] for s in lists):
        raise InvalidInputError("controllers were not evaluated on identical seed lists")
    return ExperimentReport(
        config_hash=config_hash,
        seeds=lists[0] if lists else [],
        controllers={k: aggregate(v) for k, v in by_name.items()},
        coverage=coverage or {},
    )


def evaluate(controllers: dict, config, seeds, progress=None) -> list:
    """Run every controller on every seed; returns (name, seed, metrics) rows.

    ``controllers`` maps a name to a rollout controller
    ``(state, history, goal) -> ControlInput``.  The same seed list is used
    for every controller, so the comparison is paired.
    """
    rows = []
    for name, ctl in controllers.items():
        for seed in seeds:
            _, m = rollout_episode(config, ctl, seed)
            rows.append((name, seed, m))
            if progress is not None:
                progress(name, seed, m)
    return rows
