"""Reward decomposition over one decision period."""
from __future__ import annotations

from dataclasses import dataclass

from .actions import Action, speed_delta
from .scenario import DECISION_PERIOD
from .world import WorldState

COLLISION_PENALTY = 10.0
EFF_WEIGHT = 0.15
COMFORT_WEIGHT = 0.1
# Lane preference = approach shaping + hold bonus.  The shaping term pays per
# lane-width of progress toward the target and telescopes to ~zero over any
# round trip, so wandering earns nothing while approach has a dense gradient
# at every distance; the hold bonus makes parking on the directed lane worth
# more than raw speed.  Speed income itself only counts while inside the hold
# band: efficiency that conflicts with the directive is worth nothing, which
# keeps the speed gradient from training the policy to ignore lane targets.
HOLD_WEIGHT = 0.8
SHAPE_WEIGHT = 1.0
HOLD_BAND = 0.5    # lane widths
ACCEL_SCALE = 5.0  # m/s^2
# Comfort also charges a flat fee per non-Cruise actuation.  Without it,
# commanding SpeedUp forever at the speed cap is free and its probability
# never receives a downward gradient, so it shadows the lane-change actions
# at argmax even after the policy has learned the correct turn direction.
ACTION_COST = 0.02


@dataclass(frozen=True)
class RewardBreakdown:
    safe: float
    eff: float
    comfort: float
    pref: float

    @property
    def total(self) -> float:
        return self.safe + self.eff + self.comfort + self.pref

    def to_dict(self) -> dict:
        return {
            "safe": self.safe, "eff": self.eff, "comfort": self.comfort,
            "pref": self.pref, "total": self.total,
        }


ZERO_REWARD = RewardBreakdown(0.0, 0.0, 0.0, 0.0)


def action_accel(action: Action) -> float:
    """Acceleration implied by a discrete action: its speed step over one period."""
    return speed_delta(action) / DECISION_PERIOD


def compute_reward(
    w_before: WorldState,
    w_after: WorldState,
    action: Action,
    prev_action: Action,
    y_des: float,
) -> RewardBreakdown:
    """Reward for the decision period taking w_before to w_after via `action`.

    Comfort penalizes changes in the action-implied acceleration (the discrete
    actions are all the agent controls; PID smoothness is not its doing).
    """
    config = w_after.config
    ego = w_after.ego

    collided_now = w_after.collided and not w_before.collided
    safe = -COLLISION_PENALTY if collided_now else 0.0

    jerk = abs(action_accel(action) - action_accel(prev_action)) / ACCEL_SCALE
    churn = ACTION_COST if action != Action.CRUISE else 0.0
    comfort = -COMFORT_WEIGHT * jerk - churn

    miss_before = abs(w_before.ego.y - y_des) / config.lane_width
    miss_after = abs(ego.y - y_des) / config.lane_width
    on_target = miss_after < HOLD_BAND
    hold = HOLD_WEIGHT if on_target else 0.0
    pref = SHAPE_WEIGHT * (miss_before - miss_after) + hold

    v_min, v_max = config.speed_limits
    frac = (ego.vx - v_min) / (v_max - v_min)
    eff = EFF_WEIGHT * min(max(frac, 0.0), 1.0) if on_target else 0.0

    return RewardBreakdown(safe=safe, eff=eff, comfort=comfort, pref=pref)
