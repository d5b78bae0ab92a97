"""Seeded traffic world: vehicle kinematics, background traffic, collisions, TTC.

All vehicles share one kinematic bicycle integrator. Background vehicles follow
the Intelligent Driver Model along their lane and never change lanes; vehicles
that leave the road corridor are recycled at the entry deterministically via
the world's own generator stream.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .scenario import ACCEL_LIMIT, SIM_DT, STEER_LIMIT, InvalidConfig, ScenarioConfig

EGO_ID = 0
BARRIER_ID = 1  # merge scenario: static blocker at the end of the ramp lane

# IDM parameters for background traffic.
IDM_A_MAX = 3.0
IDM_B = 2.0
IDM_T = 1.5
IDM_S0 = 2.0
IDM_DELTA = 4

# Lateral lane-keeping gains (shared with the ego PID's lateral cascade).
KP_LAT = 0.3
KP_HEAD = 2.0
HEADING_REF_LIMIT = math.pi / 6


class UnknownVehicle(KeyError):
    """Vehicle id not present in the world."""


@dataclass
class VehicleState:
    id: int
    x: float
    y: float
    vx: float
    vy: float
    heading: float = 0.0
    lane: int = 0
    direction: int = 1          # +1 forward, -1 oncoming (two_way only)
    length: float = 5.0
    width: float = 2.0
    is_ego: bool = False
    target_speed: float = 0.0   # background desired speed (IDM v0)

    @property
    def speed(self) -> float:
        """Forward speed along the vehicle's own direction of travel."""
        return math.hypot(self.vx, self.vy)

    def copy(self) -> "VehicleState":
        return replace(self)


@dataclass
class WorldState:
    config: ScenarioConfig
    time: float
    vehicles: list[VehicleState]
    ego_id: int = EGO_ID
    collided: bool = False
    step_count: int = 0
    rng_state: dict = field(default_factory=dict)

    @property
    def ego(self) -> VehicleState:
        for v in self.vehicles:
            if v.id == self.ego_id:
                return v
        raise UnknownVehicle(self.ego_id)

    def vehicle(self, vehicle_id: int) -> VehicleState:
        for v in self.vehicles:
            if v.id == vehicle_id:
                return v
        raise UnknownVehicle(vehicle_id)

    def rng(self) -> np.random.Generator:
        gen = np.random.default_rng()
        gen.bit_generator.state = self.rng_state
        return gen

    def copy(self) -> "WorldState":
        return WorldState(
            config=self.config,
            time=self.time,
            vehicles=[v.copy() for v in self.vehicles],
            ego_id=self.ego_id,
            collided=self.collided,
            step_count=self.step_count,
            rng_state=dict(self.rng_state),
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, WorldState):
            return NotImplemented
        return (
            self.config == other.config
            and self.time == other.time
            and self.vehicles == other.vehicles
            and self.ego_id == other.ego_id
            and self.collided == other.collided
            and self.step_count == other.step_count
        )


def lane_target_speed(config: ScenarioConfig, lane: int, direction: int = 1) -> float:
    """Desired IDM speed per lane; left lanes run faster than right ones."""
    if config.kind == "two_way":
        return 0.9 * config.v_max
    if config.lane_count == 1:
        return 0.9 * config.v_max
    frac = lane / (config.lane_count - 1)
    return config.v_max * (0.95 - 0.20 * frac)


def _spawn_lane_vehicles(
    config: ScenarioConfig,
    rng: np.random.Generator,
    lane: int,
    direction: int,
    next_id: int,
    exclusion: tuple[float, float] | None,
    x_max: float | None = None,
) -> tuple[list[VehicleState], int]:
    """Poisson-space one lane with background vehicles."""
    per_lane_density = config.traffic_density / max(
        1, config.lane_count - (1 if config.kind == "two_way" else 0)
    )
    out: list[VehicleState] = []
    if per_lane_density <= 0:
        return out, next_id
    mean_gap = 1000.0 / per_lane_density
    limit = config.road_length if x_max is None else x_max

    def excluded(pos: float) -> bool:
        return exclusion is not None and exclusion[0] <= pos <= exclusion[1]

    prev_x: float | None = None
    prev_speed = 0.0
    x = rng.exponential(mean_gap)
    while x < limit:
        if not excluded(x):
            speed = rng.uniform(0.7 * config.v_max, config.v_max)
            if prev_x is not None:
                # A faster car spawned behind a slower one must be able to
                # brake off the closing speed; a flat floor is not enough.
                closing = max(0.0, prev_speed - speed)
                min_advance = (5.0 + IDM_S0 + 1.5 * closing
                               + closing * closing / 8.0)
                x = max(x, prev_x + min_advance)
            if x < limit and not excluded(x):
                pos_x = x if direction > 0 else config.road_length - x
                out.append(
                    VehicleState(
                        id=next_id,
                        x=pos_x,
                        y=config.lane_center(lane),
                        vx=direction * speed,
                        vy=0.0,
                        heading=0.0 if direction > 0 else math.pi,
                        lane=lane,
                        direction=direction,
                        target_speed=lane_target_speed(config, lane, direction),
                    )
                )
                next_id += 1
                prev_x, prev_speed = x, speed
        x += max(IDM_S0 + 6.0, rng.exponential(mean_gap))
    return out, next_id


def build_scenario(config: ScenarioConfig) -> WorldState:
    """Deterministic initial world for a config + seed.

    Ego placement: highway -> lane index 2 of 4 ("lane 3") at x = 0; merge ->
    start of the on-ramp; two_way -> own lane behind a slower leader.
    """
    if not isinstance(config, ScenarioConfig):
        raise InvalidConfig("config must be a ScenarioConfig")
    rng = np.random.default_rng(config.seed)
    vehicles: list[VehicleState] = []
    next_id = 2  # 0 = ego, 1 = reserved for the merge barrier

    if config.kind == "highway":
        ego_lane = min(2, config.lane_count - 1)
        ego = VehicleState(
            id=EGO_ID, x=0.0, y=config.lane_center(ego_lane),
            vx=config.v_min, vy=0.0, lane=ego_lane, is_ego=True,
        )
        for lane in range(config.lane_count):
            exclusion = (-20.0, 20.0) if lane == ego_lane else None
            spawned, next_id = _spawn_lane_vehicles(
                config, rng, lane, +1, next_id, exclusion
            )
            vehicles.extend(spawned)

    elif config.kind == "merge":
        ramp_lane = config.lane_count - 1
        ego = VehicleState(
            id=EGO_ID, x=0.0, y=config.lane_center(ramp_lane),
            vx=0.6 * config.v_max, vy=0.0, lane=ramp_lane, is_ego=True,
        )
        barrier = VehicleState(
            id=BARRIER_ID, x=config.ramp_end + 10.0, y=config.lane_center(ramp_lane),
            vx=0.0, vy=0.0, lane=ramp_lane, length=2.0, target_speed=0.0,
        )
        vehicles.append(barrier)
        for lane in range(config.lane_count - 1):  # main lanes only
            spawned, next_id = _spawn_lane_vehicles(config, rng, lane, +1, next_id, None)
            vehicles.extend(spawned)

    else:  # two_way
        ego_lane = 1
        ego = VehicleState(
            id=EGO_ID, x=0.0, y=config.lane_center(ego_lane),
            vx=0.5 * config.v_max, vy=0.0, lane=ego_lane, is_ego=True,
        )
        leader = VehicleState(
            id=next_id, x=25.0, y=config.lane_center(ego_lane),
            vx=0.45 * config.v_max, vy=0.0, lane=ego_lane,
            target_speed=0.45 * config.v_max,
        )
        next_id += 1
        vehicles.append(leader)
        if config.traffic_density > 0:
            spawned, next_id = _spawn_lane_vehicles(
                config, rng, 0, -1, next_id, exclusion=(config.road_length - 80.0, config.road_length)
            )
            if not spawned:  # contract: density > 0 implies oncoming traffic exists
                spawned = [
                    VehicleState(
                        id=next_id, x=0.6 * config.road_length, y=config.lane_center(0),
                        vx=-0.8 * config.v_max, vy=0.0, heading=math.pi, lane=0,
                        direction=-1, target_speed=lane_target_speed(config, 0, -1),
                    )
                ]
                next_id += 1
            vehicles.extend(spawned)

    world = WorldState(
        config=config,
        time=0.0,
        vehicles=[ego] + vehicles,
        ego_id=EGO_ID,
        collided=False,
        step_count=0,
        rng_state=rng.bit_generator.state,
    )
    _assert_no_overlap(world)
    return world


def _assert_no_overlap(world: WorldState) -> None:
    for i, a in enumerate(world.vehicles):
        for b in world.vehicles[i + 1:]:
            if rectangles_overlap(a, b):
                raise InvalidConfig(
                    f"initial overlap between vehicles {a.id} and {b.id}"
                )


# ---------------------------------------------------------------------------
# Collision geometry: oriented-rectangle overlap via the separating axis test.
# ---------------------------------------------------------------------------

def _rect_corners(v: VehicleState) -> np.ndarray:
    c, s = math.cos(v.heading), math.sin(v.heading)
    hl, hw = v.length / 2.0, v.width / 2.0
    axis_l = np.array([c, s])
    axis_w = np.array([-s, c])
    center = np.array([v.x, v.y])
    return np.array([
        center + hl * axis_l + hw * axis_w,
        center + hl * axis_l - hw * axis_w,
        center - hl * axis_l - hw * axis_w,
        center - hl * axis_l + hw * axis_w,
    ])


def rectangles_overlap(a: VehicleState, b: VehicleState) -> bool:
    # cheap prefilter: bounding circles
    reach = (a.length + a.width + b.length + b.width) / 2.0
    if abs(a.x - b.x) > reach or abs(a.y - b.y) > reach:
        return False
    ca, cb = _rect_corners(a), _rect_corners(b)
    for heading in (a.heading, b.heading):
        c, s = math.cos(heading), math.sin(heading)
        for axis in (np.array([c, s]), np.array([-s, c])):
            pa = ca @ axis
            pb = cb @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


def _any_collision(world: WorldState) -> bool:
    vs = world.vehicles
    for i, a in enumerate(vs):
        for b in vs[i + 1:]:
            if rectangles_overlap(a, b):
                return True
    return False


# ---------------------------------------------------------------------------
# Background behavior: IDM car-following + lane centering, no lane changes.
# ---------------------------------------------------------------------------

def idm_acceleration(v: float, v0: float, gap: float | None, delta_v: float) -> float:
    """IDM longitudinal command. gap is the bumper gap to the leader, None = free road."""
    v0 = max(v0, 1e-3)
    free = IDM_A_MAX * (1.0 - (v / v0) ** IDM_DELTA)
    if gap is None:
        accel = free
    else:
        s = max(gap, 0.1)
        s_star = IDM_S0 + v * IDM_T + v * delta_v / (2.0 * math.sqrt(IDM_A_MAX * IDM_B))
        accel = IDM_A_MAX * (1.0 - (v / v0) ** IDM_DELTA - (s_star / s) ** 2)
    return float(np.clip(accel, -ACCEL_LIMIT, IDM_A_MAX))


def _leader_of(world: WorldState, veh: VehicleState) -> VehicleState | None:
    """Nearest body ahead in the vehicle's travel direction that occupies or
    encroaches its lane band.

    The lane flag freezes mid-lane-change, so matching flags alone would leave
    followers blind to a cut-in until the changer settles; a body test on the
    lateral band closes that window.
    """
    lane_y = world.config.lane_center(veh.lane)
    best = None
    best_gap = math.inf
    for other in world.vehicles:
        if other.id == veh.id:
            continue
        if other.lane != veh.lane and (
            abs(other.y - lane_y)
            >= (world.config.lane_width + other.width) / 2.0
        ):
            continue
        ahead = (other.x - veh.x) * veh.direction
        if 0 < ahead < best_gap:
            best_gap = ahead
            best = other
    return best


def lane_keep_steer(veh: VehicleState, y_target: float) -> float:
    """Proportional lane centering valid for both travel directions."""
    base = 0.0 if veh.direction > 0 else math.pi
    h = math.remainder(veh.heading - base, math.tau)
    h_ref = float(np.clip(veh.direction * KP_LAT * (y_target - veh.y),
                          -HEADING_REF_LIMIT, HEADING_REF_LIMIT))
    return float(np.clip(KP_HEAD * (h_ref - h), -STEER_LIMIT, STEER_LIMIT))


def background_policy(world: WorldState, vehicle_id: int) -> tuple[float, float]:
    """(accel, steer) for one background vehicle."""
    veh = world.vehicle(vehicle_id)
    if veh.is_ego:
        raise UnknownVehicle(f"vehicle {vehicle_id} is the ego")
    if vehicle_id == BARRIER_ID:
        return 0.0, 0.0
    leader = _leader_of(world, veh)
    speed = veh.speed
    if leader is None:
        accel = idm_acceleration(speed, veh.target_speed, None, 0.0)
    else:
        gap = abs(leader.x - veh.x) - (leader.length + veh.length) / 2.0
        delta_v = speed - leader.speed * (1 if leader.direction == veh.direction else -1)
        accel = idm_acceleration(speed, veh.target_speed, gap, delta_v)
    steer = lane_keep_steer(veh, world.config.lane_center(veh.lane))
    return accel, steer


# ---------------------------------------------------------------------------
# Integration
# ---------------------------------------------------------------------------

def _advance_vehicle(veh: VehicleState, accel: float, steer: float,
                     dt: float, lane_width: float, lane_count: int) -> None:
    """Kinematic bicycle step, explicit Euler, wheelbase = vehicle length."""
    accel = float(np.clip(accel, -ACCEL_LIMIT, ACCEL_LIMIT))
    steer = float(np.clip(steer, -STEER_LIMIT, STEER_LIMIT))
    speed = veh.speed
    veh.x += veh.vx * dt
    veh.y += veh.vy * dt
    veh.heading += speed / veh.length * math.tan(steer) * dt
    speed = max(0.0, speed + accel * dt)
    base = 0.0 if veh.direction > 0 else math.pi
    veh.vx = speed * math.cos(veh.heading)
    veh.vy = speed * math.sin(veh.heading)
    h = math.remainder(veh.heading - base, math.tau)
    if abs(h) < 0.1:
        veh.lane = min(max(int(round(veh.y / lane_width)), 0), lane_count - 1)


def _recycle(world: WorldState, rng: np.random.Generator) -> None:
    """Respawn background vehicles that left the corridor, at their lane entry."""
    config = world.config
    for veh in world.vehicles:
        if veh.is_ego or veh.id == BARRIER_ID:
            continue
        exited = (veh.direction > 0 and veh.x > config.road_length + veh.length) or (
            veh.direction < 0 and veh.x < -veh.length
        )
        if not exited:
            continue
        entry = -veh.length if veh.direction > 0 else config.road_length + veh.length
        gap_draw = rng.exponential(40.0)
        speed = rng.uniform(0.7 * config.v_max, config.v_max)
        x = entry - veh.direction * gap_draw
        # push back until clear of everything in that lane
        for _ in range(100):
            clear = all(
                o.id == veh.id or o.lane != veh.lane
                or abs(o.x - x) > (o.length + veh.length) / 2.0 + IDM_S0 + speed * 1.0
                for o in world.vehicles
            )
            if clear:
                break
            x -= veh.direction * 20.0
        veh.x = x
        veh.y = config.lane_center(veh.lane)
        veh.heading = 0.0 if veh.direction > 0 else math.pi
        veh.vx = veh.direction * speed
        veh.vy = 0.0


def step_world(world: WorldState, ego_controls: tuple[float, float],
               sim_dt: float = SIM_DT) -> WorldState:
    """Advance every vehicle one physics step; returns a new WorldState."""
    new = world.copy()
    config = new.config
    rng = new.rng()

    commands: dict[int, tuple[float, float]] = {}
    for veh in new.vehicles:
        if veh.is_ego:
            commands[veh.id] = ego_controls
        elif veh.id == BARRIER_ID:
            commands[veh.id] = (0.0, 0.0)
        else:
            commands[veh.id] = background_policy(new, veh.id)

    for veh in new.vehicles:
        accel, steer = commands[veh.id]
        _advance_vehicle(veh, accel, steer, sim_dt, config.lane_width, config.lane_count)

    _recycle(new, rng)

    new.step_count += 1
    new.time = new.step_count * sim_dt
    if not new.collided and _any_collision(new):
        new.collided = True
    new.rng_state = rng.bit_generator.state
    return new


# ---------------------------------------------------------------------------
# Queries
# ---------------------------------------------------------------------------

def _bumper_gap(ego: VehicleState, other: VehicleState) -> float:
    return abs(other.x - ego.x) - (other.length + ego.length) / 2.0


def nearest_in_lane(world: WorldState, lane: int, side: str) -> VehicleState | None:
    """Nearest non-ego vehicle in `lane`, ahead of or behind the ego."""
    ego = world.ego
    best = None
    best_dist = math.inf
    for veh in world.vehicles:
        if veh.is_ego or veh.lane != lane:
            continue
        dx = veh.x - ego.x
        if side == "ahead" and dx <= 0:
            continue
        if side == "behind" and dx >= 0:
            continue
        if abs(dx) < best_dist:
            best_dist = abs(dx)
            best = veh
    return best


def compute_ttc(world: WorldState, lane: int, side: str = "ahead") -> float:
    """Time to collision against the nearest vehicle in `lane`; inf if none/opening."""
    if side not in ("ahead", "behind"):
        raise ValueError(f"side must be 'ahead' or 'behind', got {side!r}")
    ego = world.ego
    other = nearest_in_lane(world, lane, side)
    if other is None:
        return math.inf
    gap = _bumper_gap(ego, other)
    closing = (ego.vx - other.vx) if side == "ahead" else (other.vx - ego.vx)
    if gap <= 0.0:
        return 0.0
    if closing <= 0.0:
        return math.inf
    return gap / closing
