"""Planner backend: prompt assembly plus a stub or remote language model.

The stub reads the same prose a remote model would and answers from a small
rule table, so the whole loop (prompt -> reasoning -> fenced JSON -> parse)
runs deterministically offline.  Set FASTSLOW_LLM_BASE_URL (and optionally
FASTSLOW_LLM_API_KEY / FASTSLOW_LLM_MODEL) to use an OpenAI-style
chat-completions endpoint instead.
"""
from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass

import requests

from .memory import MemoryEntry

PROMPT_CHAR_BUDGET = 4000
NO_MEMORY_SENTINEL = "No similar past cases."

SYSTEM_PROMPT = (
    "You are the high-level planner of an autonomous car. You receive a scene "
    "description, an operator instruction, and similar past cases. Think step "
    "by step about safety first, then the instruction. End your reply with "
    "exactly one fenced JSON block:\n"
    '```json\n{"target_lane": <int>, "speed_intent": -1|0|1, '
    '"urgency": <float 0..1>, "rationale": "<short reason>"}\n```\n'
    "Lane indices start at 0 on the left. speed_intent +1 means drive faster, "
    "-1 means slow down."
)

ENV_BASE_URL = "FASTSLOW_LLM_BASE_URL"
ENV_API_KEY = "FASTSLOW_LLM_API_KEY"
ENV_MODEL = "FASTSLOW_LLM_MODEL"

_HURRY_WORDS = ("hurry", "fast", "late", "quick", "rush", "overtake", "pass")
_CAREFUL_WORDS = ("careful", "safe", "slow", "cautious", "gentle", "easy")


class LLMUnavailable(RuntimeError):
    """Remote planner not configured or not answering."""


@dataclass(frozen=True)
class Prompt:
    system: str
    user: str

    @property
    def chars(self) -> int:
        return len(self.system) + len(self.user)


def _memory_line(entry: MemoryEntry, score: float) -> str:
    d = entry.directive
    scene_one_line = entry.scene.replace("\n", " | ")
    if len(scene_one_line) > 400:
        scene_one_line = scene_one_line[:400] + "..."
    return (f"- (similarity {score:.2f}, outcome {entry.outcome:+.0f}) "
            f"{scene_one_line} -> lane {d.get('target_lane')}, "
            f"speed {int(d.get('speed_intent', 0)):+d}")


def build_prompt(scene_text: str, instruction: str,
                 memories: list[tuple[MemoryEntry, float]],
                 error_note: str = "",
                 budget: int = PROMPT_CHAR_BUDGET) -> Prompt:
    """Assemble the user message, dropping oldest cases to stay under budget.

    The budget covers the whole prompt, system part included.
    """
    user_budget = max(budget - len(SYSTEM_PROMPT), 0)
    kept = sorted(memories, key=lambda pair: pair[0].time)  # oldest first

    def render(mems: list[tuple[MemoryEntry, float]]) -> str:
        if mems:
            block = "\n".join(_memory_line(e, s) for e, s in mems)
        else:
            block = NO_MEMORY_SENTINEL
        parts = [
            "Current scene:", scene_text, "",
            f"Operator instruction: {instruction if instruction else '(none)'}",
            "", "Similar past cases:", block, "",
        ]
        if error_note:
            parts.append(f"Note: {error_note}")
        parts.append("Decide the directive now.")
        return "\n".join(parts)

    user = render(kept)
    while len(user) > user_budget and kept:
        kept = kept[1:]
        user = render(kept)
    if len(user) > user_budget:
        user = user[:user_budget]
    return Prompt(system=SYSTEM_PROMPT, user=user)


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------

def query_llm(prompt: Prompt, mode: str = "stub") -> str:
    if mode == "stub":
        return _stub_response(prompt)
    if mode == "remote":
        return _remote_response(prompt)
    raise ValueError(f"unknown planner mode {mode!r}")


def _remote_response(prompt: Prompt) -> str:
    base = os.environ.get(ENV_BASE_URL)
    if not base:
        raise LLMUnavailable(f"{ENV_BASE_URL} is not set")
    headers = {"Content-Type": "application/json"}
    key = os.environ.get(ENV_API_KEY)
    if key:
        headers["Authorization"] = f"Bearer {key}"
    body = {
        "model": os.environ.get(ENV_MODEL, "planner"),
        "messages": [
            {"role": "system", "content": prompt.system},
            {"role": "user", "content": prompt.user},
        ],
        "temperature": 0.0,
    }
    try:
        resp = requests.post(f"{base.rstrip('/')}/chat/completions",
                             json=body, headers=headers, timeout=30)
    except requests.RequestException as exc:
        raise LLMUnavailable(str(exc)) from exc
    if resp.status_code != 200:
        raise LLMUnavailable(f"planner endpoint returned {resp.status_code}")
    try:
        return resp.json()["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError) as exc:
        raise LLMUnavailable(f"malformed planner response: {exc}") from exc


# ---------------------------------------------------------------------------
# Stub planner
# ---------------------------------------------------------------------------

def _scan(pattern: str, text: str) -> re.Match | None:
    return re.search(pattern, text)


def _stub_decision(user: str) -> tuple[int, int, float, str]:
    """Rule table over the rendered scene + instruction -> directive fields."""
    ego_m = _scan(r"Ego vehicle: lane (\d+)", user)
    count_m = _scan(r"road with (\d+) lanes", user)
    ego_lane = int(ego_m.group(1)) if ego_m else 0
    lane_count = int(count_m.group(1)) if count_m else 1
    two_way = "two_way" in user
    instr_m = _scan(r"Operator instruction: (.*)", user)
    instr = (instr_m.group(1) if instr_m else "").lower()
    if instr == "(none)":
        instr = ""

    leader_m = _scan(rf"Lane {ego_lane}[^\n]*?vehicle ([\d.]+) m ahead", user)
    leader_gap = float(leader_m.group(1)) if leader_m else None

    oncoming_ahead_m = _scan(r"Lane 0 \(oncoming\): ([^;]*)", user)
    oncoming_ahead = oncoming_ahead_m.group(1) if oncoming_ahead_m else ""
    ttc_m = _scan(r"TTC ([\d.]+) s", oncoming_ahead)
    oncoming_ttc = float(ttc_m.group(1)) if ttc_m else None
    oncoming_clear = ("clear ahead" in oncoming_ahead
                      or "no closing" in oncoming_ahead)

    lane_m = _scan(r"lane\s+(-?\d+)", instr)
    if lane_m:
        return (int(lane_m.group(1)), 0, 0.4,
                "operator asked for a specific lane")
    if "left" in instr:
        return (max(ego_lane - 1, 0), 0, 0.4, "operator asked to move left")
    if "right" in instr:
        return (min(ego_lane + 1, lane_count - 1), 0, 0.4,
                "operator asked to move right")

    if any(w in instr for w in _HURRY_WORDS):
        if two_way:
            if ego_lane == 0:
                return (1, 1, 0.8, "finish the pass and return to own lane")
            window_ok = oncoming_clear or (oncoming_ttc is not None
                                           and oncoming_ttc >= 16.0)
            if leader_gap is not None and leader_gap < 60.0 and window_ok:
                return (0, 1, 0.8, "overtake the slow leader using the "
                                   "oncoming lane while it is clear")
            return (ego_lane, 1, 0.5,
                    "hold the lane until an overtaking window opens")
        target = ego_lane - 1 if ego_lane > 0 else ego_lane
        return (target, 1, 0.8, "move toward the faster left lane")

    if any(w in instr for w in _CAREFUL_WORDS):
        return (ego_lane, -1, 0.2, "reduce speed and keep the lane")

    if two_way and ego_lane == 0:
        return (1, 1, 0.6, "return to own lane after passing")
    return (ego_lane, 0, 0.3, "maintain current lane and speed")


def _stub_response(prompt: Prompt) -> str:
    lane, speed, urgency, why = _stub_decision(prompt.user)
    payload = json.dumps({"target_lane": lane, "speed_intent": speed,
                          "urgency": urgency, "rationale": why})
    speed_word = {1: "speed up", 0: "hold speed", -1: "slow down"}[speed]
    return (
        f"Observation: reviewing the scene and the operator instruction.\n"
        f"Reasoning: {why}.\n"
        f"Decision: target lane {lane}, {speed_word}.\n"
        f"```json\n{payload}\n```"
    )
