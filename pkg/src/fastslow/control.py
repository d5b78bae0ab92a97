"""Low-level control: action-to-setpoint mapping, PID tracking, safety mask,
and arbitration between planner directives and the mask.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

from .actions import Action, SPEED_STEP
from .scenario import ACCEL_LIMIT, SIM_DT, STEER_LIMIT, SUBSTEPS, ScenarioConfig
from .slow.directive import Directive
from .world import (
    KP_HEAD,
    KP_LAT,
    HEADING_REF_LIMIT,
    VehicleState,
    WorldState,
    _advance_vehicle,
    _bumper_gap,
    compute_ttc,
    nearest_in_lane,
    rectangles_overlap,
)

KP_SPEED = 1.0

# Mask thresholds.  Front checks gate Cruise/SpeedUp against the current-lane
# leader; turn checks gate lane changes against both lanes.  Gap floors catch
# the slow-closing case where TTC alone looks safe.
FRONT_TTC_MIN = 2.0
FRONT_GAP_MIN = 5.0
TURN_REAR_TTC_MIN = 1.5
TURN_REAR_GAP_MIN = 2.0
TURN_FRONT_TTC_MIN = 1.0   # current-lane leader; relaxed because we are leaving
TURN_FRONT_GAP_MIN = 3.0
ENVELOPE_FLOOR = 6.0       # covers bumper overlap for 5 m vehicles plus margin
ENVELOPE_REAR_FACTOR = 1.0
ENVELOPE_FRONT_FACTOR = 0.5
OVERTAKE_WINDOW = 16.0     # two_way: twice the nominal 8 s pass duration
OVERTAKE_CONTEXT_RANGE = 60.0

HOLD_TIMEOUT = 5.0

# Admission margins.  TTC floors alone admit states the executor cannot brake
# out of: repeated SlowDown decrements realize only 2.5*(1 - 0.9**10) = 1.63
# m/s of shed per decision period through the proportional speed loop, far
# below the 5 m/s^2 actuator limit, so recoverability has to be budgeted at
# that authority.  Likewise the lane flag freezes while |heading| > 0.1
# mid-change, leaving followers' car-following blind to a cut-in until the
# flag flips (measured 2.1 s at 6 m/s down to 0.5 s at 30 m/s).
BRAKE_AUTHORITY = 2.5 * (1.0 - 0.9 ** 10)
IDM_BRAKE = 5.0
MARGIN_PAD = 2.0
DECISION_HOLD = 1.0        # one period elapses before the next chance to brake


def _blind_time(speed: float) -> float:
    """Seconds a lane change leaves followers' car-following blind.

    Lateral progress scales with forward speed, so the window grows without
    bound as the ego slows: 13/v fits the measured flag-flip delay (2.1 s at
    6 m/s, 0.5 s at 30) and extrapolates to the crawling case, plus one
    half-second of follower reaction.
    """
    return max(0.5, 13.0 / max(speed, 1.0)) + 0.5


# The lateral PID overshoots the target lane center by over a meter at highway
# speed, and a tilted 5 m body reaches almost two meters past its center line,
# so a turn can clip traffic a full lane beyond the target.  Lane-envelope
# algebra cannot see that; a one-period kinematic roll of the candidate can.
PREROLL_PAD_LONG = 2.5     # bound on background speed change over one period
PREROLL_PAD_LAT = 0.4


def _preroll_collides(world: WorldState, action: Action,
                      base: "Setpoints") -> bool:
    """Roll the candidate action one decision period against constant-velocity
    traffic with padded bodies."""
    config = world.config
    ego = replace(world.ego)
    sp = map_action(action, base, config)
    others = [
        replace(v, length=v.length + 2.0 * PREROLL_PAD_LONG,
                width=v.width + 2.0 * PREROLL_PAD_LAT)
        for v in world.vehicles if not v.is_ego
    ]
    for _ in range(SUBSTEPS):
        accel, steer = pid_step(ego, sp, config)
        _advance_vehicle(ego, accel, steer, SIM_DT,
                         config.lane_width, config.lane_count)
        for other in others:
            other.x += other.vx * SIM_DT
            other.y += other.vy * SIM_DT
            if rectangles_overlap(ego, other):
                return True
    return False


@dataclass(frozen=True)
class Setpoints:
    target_speed: float
    target_lane: int


def map_action(action: Action, setpoints: Setpoints,
               config: ScenarioConfig) -> Setpoints:
    """Apply a discrete action to the running setpoints, clipped to the road."""
    speed = setpoints.target_speed
    lane = setpoints.target_lane
    if action == Action.SLOW_DOWN:
        speed -= SPEED_STEP
    elif action == Action.SPEED_UP:
        speed += SPEED_STEP
    elif action == Action.TURN_LEFT:
        lane -= 1
    elif action == Action.TURN_RIGHT:
        lane += 1
    speed = min(max(speed, 0.0), config.v_max)
    lane = min(max(lane, 0), config.lane_count - 1)
    return Setpoints(target_speed=speed, target_lane=lane)


def pid_step(ego: VehicleState, setpoints: Setpoints, config: ScenarioConfig,
             dt: float = SIM_DT) -> tuple[float, float]:
    """Proportional tracking of the speed/lane setpoints -> (accel, steer).

    The laws are rate-independent; dt is part of the interface so gains could
    become rate-aware without touching call sites.
    """
    del dt
    accel = KP_SPEED * (setpoints.target_speed - ego.vx)
    accel = min(max(accel, -ACCEL_LIMIT), ACCEL_LIMIT)

    y_target = config.lane_center(setpoints.target_lane)
    heading_ref = KP_LAT * (y_target - ego.y)
    heading_ref = min(max(heading_ref, -HEADING_REF_LIMIT), HEADING_REF_LIMIT)
    steer = KP_HEAD * (heading_ref - ego.heading)
    steer = min(max(steer, -STEER_LIMIT), STEER_LIMIT)
    return accel, steer


# ---------------------------------------------------------------------------
# Safety mask
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MaskDecision:
    action: Action
    allowed: bool
    reason: str = ""

    def to_dict(self) -> dict:
        return {"action": int(self.action), "allowed": self.allowed,
                "reason": self.reason}


def _front_blocked(world: WorldState, lane: int,
                   ttc_min: float, gap_min: float) -> str:
    leader = nearest_in_lane(world, lane, "ahead")
    if leader is None:
        return ""
    if _bumper_gap(world.ego, leader) < gap_min:
        return "front_gap"
    if compute_ttc(world, lane, "ahead") < ttc_min:
        return "front_ttc"
    return ""


def _front_margin_short(world: WorldState, lane: int, closing_bonus: float,
                        hold: float) -> bool:
    """Gap too small to hold course for `hold` seconds and then shed the
    closing speed with the SlowDown chain."""
    leader = nearest_in_lane(world, lane, "ahead")
    if leader is None:
        return False
    ego = world.ego
    closing = ego.vx - leader.vx + closing_bonus
    if closing <= 0.0:
        return False
    need = (closing * hold
            + closing * closing / (2.0 * BRAKE_AUTHORITY)
            + MARGIN_PAD)
    return _bumper_gap(ego, leader) < need


def _rear_margin_short(world: WorldState, lane: int) -> bool:
    """Follower cannot absorb the cut-in: it closes blind until the lane flag
    flips, then brakes at its hard limit."""
    rear = nearest_in_lane(world, lane, "behind")
    if rear is None:
        return False
    ego = world.ego
    closing = rear.vx - ego.vx
    if closing <= 0.0:
        return False
    need = (closing * _blind_time(ego.vx)
            + closing * closing / (2.0 * IDM_BRAKE)
            + MARGIN_PAD)
    return _bumper_gap(ego, rear) < need


def _body_in_band(world: WorldState, lane: int) -> bool:
    """Whether the ego's body already encroaches the car-following acquisition
    band of `lane`, i.e. followers there can see it and brake for it."""
    ego = world.ego
    half_band = (world.config.lane_width + ego.width) / 2.0
    return abs(ego.y - world.config.lane_center(lane)) < half_band


def _blind_rear_margin(world: WorldState, lanes: list[int]) -> bool:
    """Rear gate for lanes the body has not yet entered: a follower there
    closes sight-unseen until the ego crosses into its acquisition band."""
    for lane in lanes:
        if _body_in_band(world, lane):
            continue
        if _rear_margin_short(world, lane):
            return True
    return False


def _front_margin_current(world: WorldState, lane: int,
                          exposure: float) -> bool:
    """Leader in the lane being left only matters while the body still
    straddles it; no recovery term needed once clear."""
    leader = nearest_in_lane(world, lane, "ahead")
    if leader is None:
        return False
    ego = world.ego
    closing = ego.vx - leader.vx
    if closing <= 0.0:
        return False
    return _bumper_gap(ego, leader) < closing * exposure + MARGIN_PAD


def _target_lane_occupied(world: WorldState, lane: int) -> bool:
    """Anyone inside the merge envelope around the ego's x position."""
    ego = world.ego
    front_extent = max(ENVELOPE_FRONT_FACTOR * ego.vx, ENVELOPE_FLOOR)
    for veh in world.vehicles:
        if veh.is_ego or veh.lane != lane:
            continue
        dx = veh.x - ego.x
        if dx >= 0.0:
            if dx <= front_extent:
                return True
        else:
            closing = max(veh.vx, 0.0)  # oncoming traffic behind us is opening
            rear_extent = max(ENVELOPE_REAR_FACTOR * closing, ENVELOPE_FLOOR)
            if -dx <= rear_extent:
                return True
    return False


def _transit_lanes(world: WorldState, anchor: int) -> list[int]:
    """Lanes the body occupies or will cross on its way to the committed lane.

    The committed lane can diverge from both the flag and the body's physical
    position mid-maneuver, so the corridor spans from where the body actually
    is to where the controller is steering it, plus the lane the nose is
    drifting into when the heading is far from straight.
    """
    ego = world.ego
    config = world.config
    phys = config.lane_of(ego.y)
    lanes = list(range(min(phys, anchor), max(phys, anchor) + 1))
    if abs(ego.heading) > 0.1:
        drift = phys + (1 if ego.heading > 0.0 else -1)
        if 0 <= drift < config.lane_count and drift not in lanes:
            lanes.append(drift)
    return lanes


def _turn_verdict(world: WorldState, action: Action,
                  base: "Setpoints") -> MaskDecision:
    ego = world.ego
    config = world.config
    anchor = base.target_lane
    delta = -1 if action == Action.TURN_LEFT else 1
    target = anchor + delta
    if not 0 <= target < config.lane_count:
        return MaskDecision(action, False, "no_lane")

    if _target_lane_occupied(world, target):
        return MaskDecision(action, False, "occupied")

    rear = nearest_in_lane(world, target, "behind")
    if rear is not None:
        if _bumper_gap(ego, rear) < TURN_REAR_GAP_MIN:
            return MaskDecision(action, False, "rear_gap")
        if compute_ttc(world, target, "behind") < TURN_REAR_TTC_MIN:
            return MaskDecision(action, False, "rear_ttc")
        if _rear_margin_short(world, target):
            return MaskDecision(action, False, "rear_margin")

    reason = _front_blocked(world, target, FRONT_TTC_MIN, FRONT_GAP_MIN)
    if reason:
        return MaskDecision(action, False, "target_" + reason)
    # The maneuver holds the current speed until the flag flips, so the leader
    # budget covers the crossing plus one decision of reaction lag.
    if _front_margin_short(world, target, 0.0,
                           _blind_time(ego.vx) + DECISION_HOLD):
        return MaskDecision(action, False, "target_front_margin")

    # Keep an eye on the lanes we are leaving or crossing: a close leader can
    # still clip us during the diagonal.
    for lane in _transit_lanes(world, anchor):
        if lane == target:
            continue
        reason = _front_blocked(world, lane, TURN_FRONT_TTC_MIN,
                                TURN_FRONT_GAP_MIN)
        if reason:
            return MaskDecision(action, False, "current_" + reason)
        if _front_margin_current(world, lane, 0.6 * _blind_time(ego.vx)):
            return MaskDecision(action, False, "current_front_margin")

    # Blind lanes anywhere on the widened corridor: followers there close
    # sight-unseen until the body reaches their band.
    phys = config.lane_of(ego.y)
    corridor = list(range(min(phys, target), max(phys, target) + 1))
    if _blind_rear_margin(world, corridor):
        return MaskDecision(action, False, "rear_margin")

    if config.kind == "two_way" and target == 0 and anchor == 1:
        leader = nearest_in_lane(world, anchor, "ahead")
        if leader is None or leader.x - ego.x > OVERTAKE_CONTEXT_RANGE:
            return MaskDecision(action, False, "no_overtake_context")
        if compute_ttc(world, target, "ahead") < OVERTAKE_WINDOW:
            return MaskDecision(action, False, "oncoming_window")

    if _preroll_collides(world, action, base):
        return MaskDecision(action, False, "forward_clearance")

    return MaskDecision(action, True)


def safety_mask(world: WorldState, action: Action,
                base: "Setpoints | None" = None) -> MaskDecision:
    """Allow or reject a candidate action given the current traffic state.

    `base` is the controller's committed setpoints: actions move the setpoints,
    not the raw pose, so admission has to judge the transition from the
    commitment.  Without it the lane flag stands in, which is only equivalent
    when the ego is settled in its lane.
    """
    action = Action(action)
    if action == Action.SLOW_DOWN:
        return MaskDecision(action, True)
    ego = world.ego
    if base is None:
        base = Setpoints(target_speed=ego.vx, target_lane=ego.lane)
    anchor = min(max(base.target_lane, 0), world.config.lane_count - 1)
    if action in (Action.CRUISE, Action.SPEED_UP):
        lanes = _transit_lanes(world, anchor)
        if anchor not in lanes:
            lanes.append(anchor)
        bonus = BRAKE_AUTHORITY if action == Action.SPEED_UP else 0.0
        for lane in lanes:
            reason = _front_blocked(world, lane, FRONT_TTC_MIN, FRONT_GAP_MIN)
            if reason:
                return MaskDecision(action, False, reason)
            if _front_margin_short(world, lane, bonus, DECISION_HOLD):
                return MaskDecision(action, False, "front_margin")
        unsettled = (world.config.lane_of(ego.y) != anchor
                     or abs(ego.heading) > 0.1)
        if unsettled:
            # Continuing a maneuver exposes the ego to followers in lanes it
            # has not yet entered, exactly as the initial turn did.
            if _blind_rear_margin(world, lanes):
                return MaskDecision(action, False, "rear_margin")
            if _preroll_collides(world, action, base):
                return MaskDecision(action, False, "forward_clearance")
        return MaskDecision(action, True)
    return _turn_verdict(world, action, base)


MaskFn = Callable[[WorldState, Action], MaskDecision]


def mask_all(world: WorldState,
             mask_fn: MaskFn | None = None,
             base: "Setpoints | None" = None) -> list[MaskDecision]:
    """Verdicts for all five candidates, indexed by action value."""
    if mask_fn is not None:
        return [mask_fn(world, a) for a in Action]
    return [safety_mask(world, a, base) for a in Action]


def filter_action(probs, world: WorldState,
                  mask_fn: MaskFn | None = None,
                  decisions: list[MaskDecision] | None = None,
                  base: "Setpoints | None" = None) -> Action:
    """Highest-probability allowed action; SlowDown if everything is rejected."""
    if decisions is None:
        decisions = mask_all(world, mask_fn, base)
    ranked = sorted(Action, key=lambda a: float(probs[int(a)]), reverse=True)
    for action in ranked:
        if decisions[int(action)].allowed:
            return action
    return Action.SLOW_DOWN


# ---------------------------------------------------------------------------
# Directive arbitration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ArbitrationState:
    pending_directive: Directive | None = None
    pending_since: float = 0.0
    hold_timeout: float = HOLD_TIMEOUT
    last_override_reason: str = ""
    # carried between decisions so "y_des keeps its previous value" has a value
    current_y_des: float | None = None
    just_applied: Directive | None = None


def reconcile_directive(directive: Directive | None, arb: ArbitrationState,
                        world: WorldState, now: float,
                        mask_fn: MaskFn | None = None,
                        setpoints: Setpoints | None = None,
                        ) -> tuple[float, ArbitrationState]:
    """Merge a (possibly new) directive with the mask's view of the world.

    A directive whose implied first lane change is rejected stays pending and
    is retried each decision step until `hold_timeout` expires, at which point
    the desired lane falls back to wherever the ego currently is.
    """
    if mask_fn is not None:
        fn = mask_fn
    else:
        def fn(w: WorldState, a: Action) -> MaskDecision:
            return safety_mask(w, a, setpoints)
    ego = world.ego
    anchor = setpoints.target_lane if setpoints is not None else ego.lane
    base = arb.current_y_des
    if base is None:
        base = world.config.lane_center(anchor)

    if directive is not None:
        candidate, since = directive, now
    elif arb.pending_directive is not None:
        candidate, since = arb.pending_directive, arb.pending_since
        if now - since > arb.hold_timeout:
            y = world.config.lane_center(anchor)
            return y, replace(arb, current_y_des=y, pending_directive=None,
                              just_applied=None,
                              last_override_reason="expired")
    else:
        return base, replace(arb, current_y_des=base, just_applied=None)

    target = candidate.target_lane
    if target == anchor:
        y = world.config.lane_center(target)
        return y, replace(arb, current_y_des=y, pending_directive=None,
                          just_applied=candidate, last_override_reason="")

    first_step = Action.TURN_LEFT if target < anchor else Action.TURN_RIGHT
    verdict = fn(world, first_step)
    if verdict.allowed:
        y = world.config.lane_center(target)
        return y, replace(arb, current_y_des=y, pending_directive=None,
                          just_applied=candidate, last_override_reason="")
    return base, replace(arb, current_y_des=base, pending_directive=candidate,
                         pending_since=since, just_applied=None,
                         last_override_reason=verdict.reason)
