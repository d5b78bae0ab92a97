"""Decision-granularity episode runner.

One place owns the action -> setpoints -> 10 physics substeps -> reward loop so
the trainer, the evaluator, the replay checker, and the live server cannot
drift apart.  Episode logs are JSONL: a header record, then per decision step
one decision record followed by its substep records, then a summary record.
Replay re-runs the logged controls from the logged seed and demands
bit-identical state hashes.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, TextIO

import numpy as np

from .actions import Action, SPEED_STEP
from .control import (
    ArbitrationState,
    MaskDecision,
    Setpoints,
    filter_action,
    map_action,
    mask_all,
    pid_step,
    reconcile_directive,
    safety_mask,
)
from .observation import Observation, observe
from .policy import PolicyParams, policy_outputs
from .rewards import RewardBreakdown, compute_reward
from .scenario import DECISION_PERIOD, SUBSTEPS, ScenarioConfig
from .slow.directive import Directive
from .trajectory import Trajectory
from .world import WorldState, build_scenario, compute_ttc, nearest_in_lane, step_world

LOG_VERSION = 1

# Keep a margin before the corridor end; background recycling only applies to
# non-ego vehicles, so the episode truncates instead of letting the ego exit.
END_MARGIN = 30.0


def derive_seed(*parts: int) -> int:
    """Stable scalar seed from a (base, episode, stream) entropy list."""
    state = np.random.SeedSequence([int(p) for p in parts]).generate_state(1)
    return int(state[0])


def state_hash(world: WorldState) -> str:
    """Order-independent digest of every vehicle's kinematic state."""
    h = hashlib.sha1()
    for veh in sorted(world.vehicles, key=lambda v: v.id):
        h.update(struct.pack("<i5d", veh.id, veh.x, veh.y, veh.vx, veh.vy,
                             veh.heading))
    h.update(b"1" if world.collided else b"0")
    return h.hexdigest()[:16]


@dataclass
class SubstepRecord:
    time: float
    x: float
    y: float
    vx: float
    speed: float
    accel_cmd: float
    steer_cmd: float
    accel: float          # realized, from the speed delta
    ttc: float
    collided: bool
    digest: str
    vehicles: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["ttc"] = self.ttc if np.isfinite(self.ttc) else None
        return d


def _vehicle_rows(world: WorldState) -> list[dict]:
    return [
        {"id": v.id, "x": round(v.x, 4), "y": round(v.y, 4),
         "vx": round(v.vx, 4), "vy": round(v.vy, 4),
         "heading": round(v.heading, 4), "lane": v.lane,
         "ego": v.is_ego}
        for v in sorted(world.vehicles, key=lambda v: v.id)
    ]


@dataclass
class StepOutcome:
    observation: Observation
    reward: RewardBreakdown
    done: bool            # collision: terminal, value 0
    truncated: bool       # horizon / corridor end: bootstrap
    executed: Action
    candidate: Action
    mask_decisions: list[MaskDecision] | None
    substeps: list[SubstepRecord]


class DrivingEnv:
    """Decision-step environment over the traffic sim.

    y_des modes: "ego" pins the desired lateral position to the reset lane,
    "random" draws a lane per episode (the training signal for directive
    following), "fixed" uses `fixed_y_des`.  `set_y_des` lets a directive
    pipeline move the target between decisions.
    """

    def __init__(self, config: ScenarioConfig, base_seed: int,
                 use_mask: bool = False, y_des_mode: str = "ego",
                 fixed_y_des: float | None = None) -> None:
        if y_des_mode not in ("ego", "random", "fixed"):
            raise ValueError(f"unknown y_des_mode {y_des_mode!r}")
        self.config = config
        self.base_seed = int(base_seed)
        self.use_mask = use_mask
        self.y_des_mode = y_des_mode
        self.fixed_y_des = fixed_y_des
        self.horizon = int(round(config.episode_horizon / DECISION_PERIOD))
        self.world: WorldState | None = None

    def reset(self, episode_index: int = 0) -> Observation:
        self.episode_index = int(episode_index)
        self.world_seed = derive_seed(self.base_seed, episode_index, 0)
        cfg = dataclasses.replace(self.config, seed=self.world_seed)
        self.world = build_scenario(cfg)
        self.draw_rng = np.random.default_rng(
            [self.base_seed, episode_index, 2])

        ego = self.world.ego
        if self.y_des_mode == "random":
            lane = int(self.draw_rng.integers(self.config.lane_count))
            if self.config.kind == "two_way":
                lane = 1  # the oncoming lane is never a standing goal
            self.y_des = self.config.lane_center(lane)
        elif self.y_des_mode == "fixed":
            self.y_des = (self.fixed_y_des if self.fixed_y_des is not None
                          else self.config.lane_center(ego.lane))
        else:
            self.y_des = self.config.lane_center(ego.lane)

        self.setpoints = Setpoints(target_speed=ego.vx, target_lane=ego.lane)
        self.prev_action = Action.CRUISE
        self.decision_index = 0
        return observe(self.world, self.y_des)

    def set_y_des(self, y_des: float) -> None:
        self.y_des = float(y_des)

    def bias_target_speed(self, delta: float) -> None:
        # A directive's speed intent moves the committed setpoint, so it gets
        # the same admission as the equivalent action: a raise is a SpeedUp
        # and may be rejected; a cut is a SlowDown and always lands.  Letting
        # the slow loop push the setpoint unchecked would defeat the mask —
        # repeated raises while closing on a leader outrun the one-period
        # braking guarantee.
        if delta > 0 and self.use_mask:
            if not safety_mask(self.world, Action.SPEED_UP,
                               self.setpoints).allowed:
                return
        speed = self.setpoints.target_speed + delta
        speed = min(max(speed, 0.0), self.config.v_max)
        self.setpoints = dataclasses.replace(self.setpoints, target_speed=speed)

    def step(self, candidate: Action,
             probs: np.ndarray | None = None) -> StepOutcome:
        if self.world is None:
            raise RuntimeError("call reset() before step()")
        candidate = Action(candidate)
        executed = candidate
        decisions: list[MaskDecision] | None = None
        if self.use_mask:
            # Admission must judge the same transition the executor performs:
            # actions move the committed setpoints, not the lane flag.
            decisions = mask_all(self.world, base=self.setpoints)
            if not decisions[int(candidate)].allowed:
                # Rejected candidates project onto the allowed set by
                # probability rank; without a distribution, brake.
                if probs is not None:
                    executed = filter_action(probs, self.world,
                                             decisions=decisions)
                else:
                    executed = Action.SLOW_DOWN

        self.setpoints = map_action(executed, self.setpoints, self.config)
        w_before = self.world
        world = w_before
        substeps: list[SubstepRecord] = []
        prev_speed = world.ego.speed
        prev_time = world.time
        for _ in range(SUBSTEPS):
            accel_cmd, steer_cmd = pid_step(world.ego, self.setpoints,
                                            self.config)
            world = step_world(world, (accel_cmd, steer_cmd))
            ego = world.ego
            substeps.append(SubstepRecord(
                time=world.time, x=ego.x, y=ego.y, vx=ego.vx, speed=ego.speed,
                accel_cmd=accel_cmd, steer_cmd=steer_cmd,
                accel=(ego.speed - prev_speed) / max(world.time - prev_time, 1e-9),
                ttc=compute_ttc(world, ego.lane, "ahead"),
                collided=world.collided,
                digest=state_hash(world),
                vehicles=_vehicle_rows(world),
            ))
            prev_speed, prev_time = ego.speed, world.time
            if world.collided:
                break

        self.world = world
        reward = compute_reward(w_before, world, executed, self.prev_action,
                                self.y_des)
        self.prev_action = executed
        self.decision_index += 1

        done = world.collided
        out_of_road = world.ego.x > self.config.road_length - END_MARGIN
        truncated = (not done and
                     (self.decision_index >= self.horizon or out_of_road))
        return StepOutcome(
            observation=observe(world, self.y_des),
            reward=reward, done=done, truncated=truncated,
            executed=executed, candidate=candidate,
            mask_decisions=decisions, substeps=substeps,
        )


# ---------------------------------------------------------------------------
# Episode log (JSONL)
# ---------------------------------------------------------------------------

class EpisodeLog:
    """Streams one episode to a JSONL file as it runs."""

    def __init__(self, fh: TextIO, env: DrivingEnv, label: str = "") -> None:
        self.fh = fh
        self._write({
            "type": "header", "version": LOG_VERSION, "label": label,
            "scenario": env.config.to_dict(), "base_seed": env.base_seed,
            "episode_index": env.episode_index, "world_seed": env.world_seed,
            "use_mask": env.use_mask, "y_des_mode": env.y_des_mode,
        })

    def _write(self, record: dict) -> None:
        self.fh.write(json.dumps(record) + "\n")

    def decision(self, t: int, outcome: StepOutcome, y_des: float,
                 log_prob: float, value: float,
                 directive: Directive | None = None,
                 arb_reason: str = "") -> None:
        self._write({
            "type": "decision", "t": t, "y_des": y_des,
            "candidate": int(outcome.candidate),
            "executed": int(outcome.executed),
            "log_prob": log_prob, "value": value,
            "reward": outcome.reward.to_dict(),
            "mask": ([d.to_dict() for d in outcome.mask_decisions]
                     if outcome.mask_decisions is not None else None),
            "directive": directive.to_dict() if directive else None,
            "arb_reason": arb_reason,
        })
        for i, rec in enumerate(outcome.substeps):
            self._write({"type": "substep", "t": t, "i": i, **rec.to_dict()})

    def summary(self, traj: Trajectory) -> None:
        self._write({
            "type": "summary", "return": traj.episode_return,
            "collided": traj.collided, "steps": len(traj),
            "final_lane": traj.final_lane, "overtakes": traj.overtakes,
        })


# ---------------------------------------------------------------------------
# Runner
# ---------------------------------------------------------------------------

DirectiveFn = Callable[[WorldState, int], Directive | None]


@dataclass
class EpisodeHooks:
    """Optional callbacks so the live server can watch an episode run."""
    on_decision: Callable | None = None
    on_substep: Callable | None = None


def run_episode(params: PolicyParams, env: DrivingEnv, episode_index: int,
                policy_rng: np.random.Generator | None = None,
                greedy: bool = False, max_steps: int | None = None,
                directive_fn: DirectiveFn | None = None,
                log: TextIO | None = None, label: str = "",
                hooks: EpisodeHooks | None = None) -> Trajectory:
    """Roll one episode; returns the Trajectory (bootstrap value included).

    `max_steps` truncates early (batch budget); `directive_fn` is polled at
    every decision boundary and its output reconciled against the mask.
    """
    obs = env.reset(episode_index)
    rng = policy_rng or np.random.default_rng(
        [env.base_seed, episode_index, 1])
    writer = EpisodeLog(log, env, label=label) if log is not None else None

    traj = Trajectory(seed=env.world_seed, scenario_kind=env.config.kind)
    arb = ArbitrationState()
    biased_plan: Directive | None = None
    leader = None
    went_out = False
    if env.config.kind == "two_way":
        leader = nearest_in_lane(env.world, env.world.ego.lane, "ahead")

    limit = env.horizon if max_steps is None else min(env.horizon, max_steps)
    outcome = None
    for t in range(limit):
        directive = None
        arb_reason = ""
        if directive_fn is not None:
            directive = directive_fn(env.world, t)
            y_des, arb = reconcile_directive(directive, arb, env.world,
                                             now=env.world.time,
                                             setpoints=env.setpoints)
            env.set_y_des(y_des)
            arb_reason = arb.last_override_reason
            # The speed intent is a bias on the setpoint, applied when the
            # plan changes — re-issuing the same standing plan every replan
            # must not integrate it into an ever-rising target.
            if arb.just_applied is not None and arb.just_applied != biased_plan:
                env.bias_target_speed(
                    arb.just_applied.speed_intent * SPEED_STEP)
                biased_plan = arb.just_applied
            traj.directed_lane = env.config.lane_of(env.y_des)
        elif env.y_des_mode in ("random", "fixed"):
            traj.directed_lane = env.config.lane_of(env.y_des)

        probs, log_probs, value = policy_outputs(params, obs.rows)
        if greedy:
            action = Action(int(np.argmax(probs)))
        else:
            action = Action(int(rng.choice(len(probs), p=probs / probs.sum())))

        y_des_now = env.y_des
        outcome = env.step(action, probs=probs)

        traj.observations.append(obs)
        traj.y_des.append(y_des_now)
        traj.actions.append(outcome.executed)
        traj.rewards.append(outcome.reward.total)
        traj.log_probs.append(float(log_probs[int(outcome.executed)]))
        traj.values.append(value)
        traj.dones.append(outcome.done)
        for rec in outcome.substeps:
            traj.step_speeds.append(rec.speed)
            traj.step_accels.append(rec.accel)
            traj.step_ttc.append(rec.ttc)

        if env.config.kind == "two_way" and leader is not None:
            lane_now = env.world.ego.lane
            if lane_now == 0:
                went_out = True
            elif lane_now == 1 and went_out:
                if env.world.ego.x > env.world.vehicle(leader.id).x:
                    traj.overtakes += 1
                went_out = False

        if writer is not None:
            writer.decision(t, outcome, y_des_now,
                            traj.log_probs[-1], value,
                            directive=directive, arb_reason=arb_reason)
        if hooks is not None and hooks.on_decision is not None:
            hooks.on_decision(env, t, outcome)

        obs = outcome.observation
        if outcome.done or outcome.truncated:
            break

    traj.collided = env.world.collided
    traj.final_lane = env.world.ego.lane
    if outcome is not None and not outcome.done:
        _, _, traj.bootstrap_value = policy_outputs(params, obs.rows)
    if writer is not None:
        writer.summary(traj)
    return traj


# ---------------------------------------------------------------------------
# Replay
# ---------------------------------------------------------------------------

@dataclass
class ReplayReport:
    ok: bool
    substeps_checked: int
    first_divergence: int | None = None
    detail: str = ""


def replay_episode(log_path: str | Path) -> ReplayReport:
    """Re-run logged controls from the logged seed; verify state digests.

    A log that stops mid-episode still verifies: the check covers exactly the
    prefix that was recorded.
    """
    path = Path(log_path)
    header = None
    controls: list[tuple[float, float, str, bool]] = []
    with path.open() as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if rec["type"] == "header":
                header = rec
            elif rec["type"] == "substep":
                controls.append((rec["accel_cmd"], rec["steer_cmd"],
                                 rec["digest"], rec["collided"]))
    if header is None:
        return ReplayReport(ok=False, substeps_checked=0,
                            detail="no header record")

    config = ScenarioConfig.from_dict(header["scenario"])
    config = dataclasses.replace(config, seed=header["world_seed"])
    world = build_scenario(config)
    for i, (accel, steer, digest, collided) in enumerate(controls):
        world = step_world(world, (accel, steer))
        if state_hash(world) != digest or world.collided != collided:
            return ReplayReport(ok=False, substeps_checked=i + 1,
                                first_divergence=i,
                                detail=f"state hash mismatch at substep {i}")
    return ReplayReport(ok=True, substeps_checked=len(controls))
