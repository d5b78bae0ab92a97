"""Directive schema, parsing of planner replies, and the planning pipeline.

A directive is the only thing the slow loop may tell the fast loop: which lane
to prefer, whether to go faster or slower, and how urgently.  Parsing reads
the LAST fenced JSON block so the planner is free to reason in prose first.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Callable

from ..scenario import ScenarioConfig
from ..world import WorldState
from .llm import LLMUnavailable, Prompt, build_prompt, query_llm
from .memory import MemoryBank
from .scene import render_scene, scene_digest

MAX_RETRIES = 2

_FENCE_RE = re.compile(r"```(?:json)?\s*([\s\S]*?)```")


class DirectiveParseError(ValueError):
    """Planner reply could not be turned into a directive."""


class NoBlockFound(DirectiveParseError):
    """Reply has no fenced JSON block."""


class SchemaViolation(DirectiveParseError):
    """Fenced block is not JSON or misses/mistypes required fields."""


class RangeViolation(DirectiveParseError):
    """Fields parse but take values outside their allowed ranges."""


@dataclass(frozen=True)
class Directive:
    target_lane: int
    speed_intent: int   # -1 slower, 0 hold, +1 faster
    urgency: float      # [0, 1]
    rationale: str = ""

    def to_dict(self) -> dict:
        return {"target_lane": self.target_lane,
                "speed_intent": self.speed_intent,
                "urgency": self.urgency,
                "rationale": self.rationale}

    @classmethod
    def from_dict(cls, data: dict) -> "Directive":
        return cls(target_lane=int(data["target_lane"]),
                   speed_intent=int(data["speed_intent"]),
                   urgency=float(data["urgency"]),
                   rationale=str(data.get("rationale", "")))


def neutral_directive(current_lane: int,
                      rationale: str = "fallback") -> Directive:
    return Directive(target_lane=current_lane, speed_intent=0, urgency=0.0,
                     rationale=rationale)


def validate_directive(d: Directive, config: ScenarioConfig) -> None:
    if not 0 <= d.target_lane < config.lane_count:
        raise RangeViolation(
            f"target_lane {d.target_lane} outside 0..{config.lane_count - 1}")
    if d.speed_intent not in (-1, 0, 1):
        raise RangeViolation(f"speed_intent {d.speed_intent} not in -1/0/1")
    if not 0.0 <= d.urgency <= 1.0:
        raise RangeViolation(f"urgency {d.urgency} outside [0, 1]")


def render_directive_block(d: Directive) -> str:
    """Fenced JSON block in the exact shape the parser expects back."""
    return "```json\n" + json.dumps(d.to_dict()) + "\n```"


def parse_directive(text: str, config: ScenarioConfig) -> Directive:
    """Last fenced JSON block -> validated Directive."""
    blocks = _FENCE_RE.findall(text)
    if not blocks:
        raise NoBlockFound("no fenced JSON block in reply")
    try:
        data = json.loads(blocks[-1])
    except json.JSONDecodeError as exc:
        raise SchemaViolation(f"fenced block is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise SchemaViolation("fenced block must hold a JSON object")

    for key in ("target_lane", "speed_intent", "urgency"):
        if key not in data:
            raise SchemaViolation(f"missing field {key!r}")
    lane, intent, urgency = (data["target_lane"], data["speed_intent"],
                             data["urgency"])
    if isinstance(lane, bool) or not isinstance(lane, int):
        raise SchemaViolation("target_lane must be an integer")
    if isinstance(intent, bool) or not isinstance(intent, int):
        raise SchemaViolation("speed_intent must be an integer")
    if isinstance(urgency, bool) or not isinstance(urgency, (int, float)):
        raise SchemaViolation("urgency must be a number")
    rationale = data.get("rationale", "")
    if not isinstance(rationale, str):
        raise SchemaViolation("rationale must be a string")

    directive = Directive(target_lane=lane, speed_intent=intent,
                          urgency=float(urgency), rationale=rationale)
    validate_directive(directive, config)
    return directive


# ---------------------------------------------------------------------------
# Pipeline: scene -> memories -> prompt -> reply -> directive
# ---------------------------------------------------------------------------

def directive_pipeline(world: WorldState, instruction: str, bank: MemoryBank,
                       mode: str = "stub", retries: int = MAX_RETRIES,
                       ) -> tuple[Directive, dict]:
    """Run the slow loop once; never raises, falls back to neutral.

    Returns the directive plus a transcript with every attempt, for logs and
    the operator console.
    """
    config = world.config
    digest = scene_digest(world)
    scene_text = render_scene(digest)
    memories = bank.retrieve(scene_text)
    transcript: dict = {
        "time": world.time,
        "scene": scene_text,
        "instruction": instruction,
        "mode": mode,
        "memories": [
            {"score": score, "outcome": entry.outcome,
             "directive": entry.directive}
            for entry, score in memories
        ],
        "attempts": [],
        "fallback": False,
    }

    error_note = ""
    last_error = "planner unavailable"
    for _ in range(1 + retries):
        prompt = build_prompt(scene_text, instruction, memories,
                              error_note=error_note)
        try:
            reply = query_llm(prompt, mode=mode)
        except LLMUnavailable as exc:
            last_error = str(exc)
            transcript["attempts"].append(
                {"prompt_chars": prompt.chars, "reply": None,
                 "error": f"unavailable: {exc}"})
            continue
        try:
            directive = parse_directive(reply, config)
        except DirectiveParseError as exc:
            last_error = str(exc)
            transcript["attempts"].append(
                {"prompt_chars": prompt.chars, "reply": reply,
                 "error": str(exc)})
            error_note = (f"your previous reply was rejected ({exc}); answer "
                          f"again with one fenced JSON block inside the "
                          f"allowed ranges")
            continue
        transcript["attempts"].append(
            {"prompt_chars": prompt.chars, "reply": reply, "error": None})
        transcript["directive"] = directive.to_dict()
        return directive, transcript

    directive = neutral_directive(world.ego.lane,
                                  rationale=f"fallback: {last_error}")
    transcript["fallback"] = True
    transcript["directive"] = directive.to_dict()
    return directive, transcript


class InstructionFeed:
    """Hands operator text to the planner at the next decision boundary."""

    def __init__(self, initial: str = "") -> None:
        self.current = initial
        self._pending: str | None = initial if initial else None

    def set(self, text: str) -> None:
        self.current = text
        self._pending = text

    def take(self) -> str | None:
        text, self._pending = self._pending, None
        return text


DirectiveFn = Callable[[WorldState, int], Directive | None]


def make_directive_fn(bank: MemoryBank, feed: InstructionFeed | None = None,
                      instruction: str = "", mode: str = "stub",
                      every: int | None = None,
                      transcripts: list | None = None) -> DirectiveFn:
    """Planner hook for the episode runner.

    Issues a directive at the first decision step, whenever the feed delivers
    new text, and (optionally) every `every` steps so the plan tracks a
    changing scene.
    """
    state = {"instruction": instruction, "fresh": True}

    def fn(world: WorldState, t: int) -> Directive | None:
        if feed is not None:
            new = feed.take()
            if new is not None:
                state["instruction"] = new
                state["fresh"] = True
        due = state["fresh"] or (every is not None and t % every == 0)
        if not due:
            return None
        state["fresh"] = False
        directive, transcript = directive_pipeline(
            world, state["instruction"], bank, mode=mode)
        if transcripts is not None:
            transcripts.append(transcript)
        return directive

    return fn
