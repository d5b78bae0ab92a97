"""Fixed-shape observation matrix fed to the policy network.

Rows: ego first, then the nearest neighbors by Euclidean distance. Columns:
[x_rel, y_rel, vx_rel, vy_rel, y_des, present]. The ego's y_des column carries
the directive slot as a signed lane error (lanes from the desired lateral
position, positive meaning the target lies in a higher lane), so the feature
varies within an episode as the ego moves; neighbors carry their own
(normalized) lateral position since background vehicles keep their lane.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .world import WorldState

N_ROWS = 6          # ego + 5 nearest neighbors
N_FEATURES = 6
POS_SCALE = 100.0   # m
VEL_SCALE = 30.0    # m/s
CLIP = 2.0


@dataclass(frozen=True)
class Observation:
    rows: np.ndarray  # (N_ROWS, N_FEATURES), float64

    def __post_init__(self):
        if self.rows.shape != (N_ROWS, N_FEATURES):
            raise ValueError(f"observation shape {self.rows.shape}")


def observe(world: WorldState, y_des: float) -> Observation:
    config = world.config
    ego = world.ego
    y_scale = config.y_scale

    rows = np.zeros((N_ROWS, N_FEATURES))
    rows[0] = [0.0, ego.y / y_scale, 0.0, 0.0,
               (y_des - ego.y) / config.lane_width, 1.0]

    others = [v for v in world.vehicles if not v.is_ego]
    others.sort(key=lambda v: math.hypot(v.x - ego.x, v.y - ego.y))
    for i, veh in enumerate(others[: N_ROWS - 1]):
        rows[i + 1] = [
            (veh.x - ego.x) / POS_SCALE,
            (veh.y - ego.y) / y_scale,
            (veh.vx - ego.vx) / VEL_SCALE,
            (veh.vy - ego.vy) / VEL_SCALE,
            veh.y / y_scale,
            1.0,
        ]
    np.clip(rows, -CLIP, CLIP, out=rows)
    return Observation(rows=rows)
