"""Episode-batch summary: the evaluation-table columns plus success rate."""
from __future__ import annotations

import math
from collections.abc import Sequence

import numpy as np

from .trajectory import Trajectory


class EmptyInput(ValueError):
    """No episodes to summarize."""


def metrics_summary(episodes: Sequence[Trajectory]) -> dict:
    """Aggregate driving metrics over a batch of episodes.

    Speed/acceleration statistics pool every sim substep; min TTC and speed
    extremes are per-episode values averaged across episodes. TTC minima
    ignore non-closing (infinite) samples; an episode with no finite TTC
    contributes nothing to that average.
    """
    if len(episodes) == 0:
        raise EmptyInput("metrics_summary needs at least one episode")

    speeds = np.concatenate([np.asarray(t.step_speeds, dtype=float) for t in episodes])
    accels = np.concatenate([np.asarray(t.step_accels, dtype=float) for t in episodes])

    min_ttcs = []
    for t in episodes:
        finite = [v for v in t.step_ttc if math.isfinite(v)]
        if finite:
            min_ttcs.append(min(finite))

    per_ep_max = [max(t.step_speeds) for t in episodes if t.step_speeds]
    per_ep_min = [min(t.step_speeds) for t in episodes if t.step_speeds]

    successes = sum(0 if t.collided else 1 for t in episodes)
    adherent = [
        t for t in episodes
        if t.directed_lane is not None and t.final_lane == t.directed_lane
        and not t.collided
    ]
    directed = [t for t in episodes if t.directed_lane is not None and not t.collided]

    return {
        "episodes": len(episodes),
        "success_rate": successes / len(episodes),
        "avg_speed": float(speeds.mean()) if speeds.size else 0.0,
        "accel_variability": float(accels.var()) if accels.size else 0.0,
        "min_ttc": float(np.mean(min_ttcs)) if min_ttcs else math.inf,
        "max_speed": float(np.mean(per_ep_max)) if per_ep_max else 0.0,
        "min_speed": float(np.mean(per_ep_min)) if per_ep_min else 0.0,
        "mean_return": float(np.mean([t.episode_return for t in episodes])),
        "adherence": (len(adherent) / len(directed)) if directed else None,
        "overtakes": int(sum(t.overtakes for t in episodes)),
    }
