"""Scenario configuration: road layout, traffic density, speed limits, seeding."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

SCENARIO_KINDS = ("highway", "merge", "two_way")

# Fixed cadences shared by the whole stack.
SIM_DT = 0.1            # physics step, seconds
DECISION_PERIOD = 1.0   # policy step, seconds (10 physics substeps)
SUBSTEPS = int(round(DECISION_PERIOD / SIM_DT))

ACCEL_LIMIT = 5.0       # |accel| bound applied to every vehicle, m/s^2
STEER_LIMIT = 0.5       # |steer| bound, rad


class InvalidConfig(ValueError):
    """Scenario configuration violates its invariants."""


@dataclass(frozen=True)
class ScenarioConfig:
    """One driving scenario.

    Lateral frame: y = 0 at the leftmost lane center, increasing rightward.
    In two_way, lane 0 carries oncoming traffic and lane 1 is the ego's lane.
    In merge, the rightmost lane is an on-ramp that ends partway down the road.
    """

    kind: str = "highway"
    lane_count: int = 4
    lane_width: float = 4.0
    road_length: float = 1200.0
    episode_horizon: float = 30.0
    traffic_density: float = 12.0   # vehicles per km
    speed_limits: tuple[float, float] = (20.0, 30.0)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in SCENARIO_KINDS:
            raise InvalidConfig(f"unknown scenario kind {self.kind!r}")
        if self.lane_count < 1:
            raise InvalidConfig("lane_count must be >= 1")
        if self.kind == "two_way" and self.lane_count != 2:
            raise InvalidConfig("two_way requires exactly 2 lanes")
        if self.kind == "merge" and self.lane_count < 2:
            raise InvalidConfig("merge requires at least 2 lanes (main + ramp)")
        if self.lane_width <= 0:
            raise InvalidConfig("lane_width must be positive")
        if self.road_length <= 0:
            raise InvalidConfig("road_length must be positive")
        if self.episode_horizon <= 0:
            raise InvalidConfig("episode_horizon must be positive")
        if self.traffic_density < 0:
            raise InvalidConfig("traffic_density must be >= 0")
        v_min, v_max = self.speed_limits
        if not v_min < v_max:
            raise InvalidConfig("speed_limits must satisfy v_min < v_max")

    @property
    def v_min(self) -> float:
        return self.speed_limits[0]

    @property
    def v_max(self) -> float:
        return self.speed_limits[1]

    @property
    def y_scale(self) -> float:
        return self.lane_count * self.lane_width

    @property
    def ramp_end(self) -> float:
        """Longitudinal position where the merge on-ramp lane ends."""
        return min(250.0, 0.4 * self.road_length)

    def lane_center(self, lane: int) -> float:
        return lane * self.lane_width

    def lane_of(self, y: float) -> int:
        lane = int(round(y / self.lane_width))
        return min(max(lane, 0), self.lane_count - 1)

    def lane_centers(self) -> list[float]:
        return [self.lane_center(i) for i in range(self.lane_count)]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["speed_limits"] = list(self.speed_limits)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(data) - known
        if extra:
            raise InvalidConfig(f"unknown scenario fields: {sorted(extra)}")
        if "speed_limits" in data:
            limits = data["speed_limits"]
            if not (isinstance(limits, (list, tuple)) and len(limits) == 2):
                raise InvalidConfig("speed_limits must be a [v_min, v_max] pair")
            data = {**data, "speed_limits": (float(limits[0]), float(limits[1]))}
        return cls(**data)


# Desk-scale presets; --scenario accepts these names or a TOML path.
PRESETS: dict[str, ScenarioConfig] = {
    "highway": ScenarioConfig(
        kind="highway", lane_count=4, road_length=1200.0, episode_horizon=30.0,
        traffic_density=12.0, speed_limits=(20.0, 30.0),
    ),
    "merge": ScenarioConfig(
        kind="merge", lane_count=3, road_length=600.0, episode_horizon=25.0,
        traffic_density=15.0, speed_limits=(10.0, 20.0),
    ),
    "two_way": ScenarioConfig(
        kind="two_way", lane_count=2, road_length=600.0, episode_horizon=40.0,
        traffic_density=6.0, speed_limits=(2.0, 8.0),
    ),
}


def load_scenario(source: str | Path, seed: int | None = None) -> ScenarioConfig:
    """Resolve a preset name or a TOML file into a ScenarioConfig."""
    name = str(source)
    if name in PRESETS:
        cfg = PRESETS[name]
    else:
        path = Path(source)
        if not path.exists():
            raise InvalidConfig(
                f"scenario {name!r} is neither a preset {sorted(PRESETS)} nor a file"
            )
        try:
            data = tomllib.loads(path.read_text())
        except tomllib.TOMLDecodeError as e:
            raise InvalidConfig(f"bad TOML in {path}: {e}") from e
        cfg = ScenarioConfig.from_dict(data)
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    return cfg


def dump_scenario_toml(cfg: ScenarioConfig) -> str:
    lines = []
    for key, value in cfg.to_dict().items():
        if isinstance(value, str):
            lines.append(f'{key} = "{value}"')
        elif isinstance(value, list):
            lines.append(f"{key} = [{', '.join(repr(float(v)) for v in value)}]")
        else:
            lines.append(f"{key} = {value!r}")
    return "\n".join(lines) + "\n"
