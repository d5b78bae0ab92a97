"""Two-speed driving stack.

A seeded multi-lane traffic simulator, an attention actor-critic trained with
clipped policy gradients, a rule-checked safety mask between policy and
actuators, and a slower language-planner loop that turns operator text into
lane/speed directives the policy then follows.
"""

__version__ = "0.1.0"

from .actions import Action, N_ACTIONS
from .episode import DrivingEnv, replay_episode, run_episode
from .metrics import metrics_summary
from .observation import Observation, observe
from .policy import (
    PolicyDims,
    PolicyParams,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .scenario import PRESETS, ScenarioConfig, load_scenario
from .slow.directive import Directive, directive_pipeline
from .slow.memory import MemoryBank
from .training import evaluate, evaluate_reference, train
from .world import build_scenario, step_world

__all__ = [
    "Action", "N_ACTIONS", "DrivingEnv", "replay_episode", "run_episode",
    "metrics_summary", "Observation", "observe", "PolicyDims", "PolicyParams",
    "init_params", "load_checkpoint", "save_checkpoint", "PRESETS",
    "ScenarioConfig", "load_scenario", "Directive", "directive_pipeline",
    "MemoryBank", "evaluate", "evaluate_reference", "train",
    "build_scenario", "step_world",
]
