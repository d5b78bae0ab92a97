"""Discrete high-level action set. Encodings are stable across checkpoints."""
from __future__ import annotations

from enum import IntEnum


class Action(IntEnum):
    SLOW_DOWN = 0
    CRUISE = 1
    SPEED_UP = 2
    TURN_LEFT = 3
    TURN_RIGHT = 4


N_ACTIONS = len(Action)

SPEED_STEP = 2.5  # m/s change per SlowDown/SpeedUp


def speed_delta(action: Action) -> float:
    """Target-speed change implied by an action (m/s over one decision period)."""
    if action == Action.SPEED_UP:
        return SPEED_STEP
    if action == Action.SLOW_DOWN:
        return -SPEED_STEP
    return 0.0
