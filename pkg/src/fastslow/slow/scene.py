"""Deterministic scene -> text encoding for the language planner.

The digest rounds to one decimal so identical situations render to identical
strings; the bag-of-words embedding therefore keys on what the planner would
actually read.
"""
from __future__ import annotations

import math
import re
import zlib

import numpy as np

from ..world import WorldState, _bumper_gap, compute_ttc, nearest_in_lane

EMBED_DIM = 64

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def scene_digest(world: WorldState) -> dict:
    """Structured snapshot of what matters for a lane/speed decision."""
    config = world.config
    ego = world.ego
    lanes = []
    for lane in range(config.lane_count):
        entry: dict = {"lane": lane}
        if config.kind == "two_way" and lane == 0:
            entry["oncoming"] = True
        for side in ("ahead", "behind"):
            veh = nearest_in_lane(world, lane, side)
            if veh is None:
                entry[side] = None
                continue
            gap = _bumper_gap(ego, veh)
            closing = (ego.vx - veh.vx) if side == "ahead" else (veh.vx - ego.vx)
            ttc = compute_ttc(world, lane, side)
            entry[side] = {
                "gap": round(gap, 1),
                "closing": round(closing, 1),
                "ttc": round(ttc, 1) if math.isfinite(ttc) else None,
            }
        lanes.append(entry)
    return {
        "kind": config.kind,
        "lane_count": config.lane_count,
        "time": round(world.time, 1),
        "ego": {"lane": ego.lane, "speed": round(ego.vx, 1),
                "x": round(ego.x, 1)},
        "lanes": lanes,
    }


def _side_phrase(info: dict | None, side: str) -> str:
    if info is None:
        return f"clear {side}"
    ttc = "no closing" if info["ttc"] is None else f"TTC {info['ttc']} s"
    return (f"vehicle {info['gap']} m {side}, closing {info['closing']} m/s, "
            f"{ttc}")


def render_scene(digest: dict) -> str:
    """Fixed-template prose; the only scene channel the planner sees."""
    ego = digest["ego"]
    lines = [
        f"Scenario: {digest['kind']} road with {digest['lane_count']} lanes.",
        f"Ego vehicle: lane {ego['lane']}, speed {ego['speed']} m/s, "
        f"position {ego['x']} m.",
    ]
    for entry in digest["lanes"]:
        tag = " (oncoming)" if entry.get("oncoming") else ""
        ahead = _side_phrase(entry["ahead"], "ahead")
        behind = _side_phrase(entry["behind"], "behind")
        lines.append(f"Lane {entry['lane']}{tag}: {ahead}; {behind}.")
    return "\n".join(lines)


def embed_text(text: str, dim: int = EMBED_DIM) -> np.ndarray:
    """Signed hash bag-of-words, L2-normalized.

    crc32 keeps the hash stable across processes (unlike salted builtin hash).
    """
    vec = np.zeros(dim)
    for token in _TOKEN_RE.findall(text.lower()):
        h = zlib.crc32(token.encode("utf-8"))
        sign = 1.0 if (h >> 17) & 1 else -1.0
        vec[h % dim] += sign
    norm = np.linalg.norm(vec)
    if norm > 0.0:
        vec /= norm
    return vec
