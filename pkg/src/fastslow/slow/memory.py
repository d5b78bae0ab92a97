"""Case memory for the planner: scene text + directive + how it went.

Persisted as JSONL so a bank doubles as an audit log; embeddings are
recomputed from the scene text on load (they are a pure function of it).
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .scene import embed_text

MEMORY_CAP = 10_000
RETRIEVE_K = 3


@dataclass(frozen=True)
class MemoryEntry:
    scene: str
    directive: dict
    outcome: float      # +1 followed and clean, 0 neutral, -1 collision
    time: float

    def to_dict(self) -> dict:
        return {"scene": self.scene, "directive": self.directive,
                "outcome": self.outcome, "time": self.time}

    @classmethod
    def from_dict(cls, data: dict) -> "MemoryEntry":
        return cls(scene=str(data["scene"]), directive=dict(data["directive"]),
                   outcome=float(data["outcome"]), time=float(data["time"]))


def outcome_score(collided: bool, followed: bool) -> int:
    if collided:
        return -1
    return 1 if followed else 0


class MemoryBank:
    """FIFO-capped store with cosine retrieval over scene embeddings."""

    def __init__(self, cap: int = MEMORY_CAP) -> None:
        if cap < 1:
            raise ValueError("cap must be >= 1")
        self.cap = cap
        self.entries: list[MemoryEntry] = []
        self._vecs: list[np.ndarray] = []

    def __len__(self) -> int:
        return len(self.entries)

    def add(self, entry: MemoryEntry) -> None:
        self.entries.append(entry)
        self._vecs.append(embed_text(entry.scene))
        while len(self.entries) > self.cap:
            self.entries.pop(0)
            self._vecs.pop(0)

    def retrieve(self, scene_text: str,
                 k: int = RETRIEVE_K) -> list[tuple[MemoryEntry, float]]:
        """Top-k by cosine similarity; ties go to the newer entry.

        Only positive similarity counts as "similar": an empty result means
        the prompt should say so rather than pad with noise.
        """
        if not self.entries:
            return []
        query = embed_text(scene_text)
        if not np.any(query):
            return []
        scores = np.stack(self._vecs) @ query
        order = sorted(range(len(scores)),
                       key=lambda i: (-scores[i], -self.entries[i].time, -i))
        out = []
        for i in order[:k]:
            if scores[i] <= 0.0:
                break
            out.append((self.entries[i], float(scores[i])))
        return out

    def save(self, path: str | Path) -> None:
        with Path(path).open("w") as fh:
            for entry in self.entries:
                fh.write(json.dumps(entry.to_dict()) + "\n")

    @classmethod
    def load(cls, path: str | Path, cap: int = MEMORY_CAP) -> "MemoryBank":
        bank = cls(cap=cap)
        with Path(path).open() as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    bank.add(MemoryEntry.from_dict(json.loads(line)))
                except (json.JSONDecodeError, KeyError, TypeError,
                        ValueError) as exc:
                    raise ValueError(f"{path}:{lineno}: bad memory record: "
                                     f"{exc}") from exc
        return bank


def write_memory(bank: MemoryBank, entry: MemoryEntry,
                 path: str | Path | None = None) -> None:
    """Add to the bank and, if given, append to its JSONL file."""
    bank.add(entry)
    if path is not None:
        with Path(path).open("a") as fh:
            fh.write(json.dumps(entry.to_dict()) + "\n")
