"""Per-episode step records consumed by the trainer and the metrics report."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .actions import Action
from .observation import Observation


@dataclass
class Trajectory:
    """One episode (possibly truncated mid-way when a batch fills up).

    Per decision step: observation, directive slot, executed action, reward,
    behavior log-probability, value estimate, done flag. Per sim substep
    (for metrics): ego speed, realized acceleration, frontal TTC.
    """

    seed: int
    scenario_kind: str
    observations: list[Observation] = field(default_factory=list)
    y_des: list[float] = field(default_factory=list)
    actions: list[Action] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)
    log_probs: list[float] = field(default_factory=list)
    values: list[float] = field(default_factory=list)
    dones: list[bool] = field(default_factory=list)
    bootstrap_value: float = 0.0
    collided: bool = False
    directed_lane: int | None = None
    final_lane: int | None = None
    step_speeds: list[float] = field(default_factory=list)
    step_accels: list[float] = field(default_factory=list)
    step_ttc: list[float] = field(default_factory=list)
    overtakes: int = 0

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def episode_return(self) -> float:
        return float(sum(self.rewards))

    @property
    def terminal_value(self) -> float:
        """Value of the state after the last step: 0 at true episode end."""
        if self.dones and self.dones[-1]:
            return 0.0
        return self.bootstrap_value

    def rewards_array(self) -> np.ndarray:
        return np.asarray(self.rewards, dtype=float)

    def values_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)
