"""TrainingRecord: a dialogue flattened into loss-masked segments."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Any, Iterable

from .dialogue import SCHEMA_VERSION, STUDENT, TEACHER, Trajectory


@dataclass(frozen=True)
class Segment:
    role: str
    text: str
    train: bool

    def to_dict(self) -> dict[str, Any]:
        return {"role": self.role, "text": self.text, "train": self.train}


def history_sha256(pairs: Iterable[tuple[str, str]]) -> str:
    blob = json.dumps([[r, t] for r, t in pairs], ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class TrainingRecord:
    task_id: str
    trajectory_id: str
    advantage: float
    segments: tuple[Segment, ...]
    reward_raw: int
    reward_discounted: float
    success_turn: int | None
    seed: int
    policy_version: int = 0
    # hash of the source dialogue, fixed at export; lets audits catch edited segments
    history_sha256: str | None = None

    def segments_sha256(self) -> str:
        return history_sha256((s.role, s.text) for s in self.segments)

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "task_id": self.task_id,
            "trajectory_id": self.trajectory_id,
            "advantage": self.advantage,
            "segments": [s.to_dict() for s in self.segments],
            "reward_raw": self.reward_raw,
            "reward_discounted": self.reward_discounted,
            "success_turn": self.success_turn,
            "seed": self.seed,
            "policy_version": self.policy_version,
            "history_sha256": self.history_sha256 or self.segments_sha256(),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> TrainingRecord:
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported record schema {d.get('schema_version')!r}")
        return cls(
            task_id=d["task_id"],
            trajectory_id=d["trajectory_id"],
            advantage=float(d["advantage"]),
            segments=tuple(Segment(s["role"], s["text"], bool(s["train"])) for s in d["segments"]),
            reward_raw=int(d["reward_raw"]),
            reward_discounted=float(d["reward_discounted"]),
            success_turn=d.get("success_turn"),
            seed=int(d["seed"]),
            policy_version=int(d.get("policy_version", 0)),
            history_sha256=d.get("history_sha256"),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False)


def segments_from_history(history) -> tuple[Segment, ...]:
    out = []
    for u in history:
        if u.role not in (STUDENT, TEACHER):
            raise ValueError(f"unknown role {u.role!r}")
        out.append(Segment(u.role, u.text, u.role == STUDENT))
    return tuple(out)


def record_from_trajectory(trajectory: Trajectory, advantage: float) -> TrainingRecord:
    if trajectory.aborted:
        raise ValueError(f"aborted trajectory {trajectory.trajectory_id} cannot be exported")
    return TrainingRecord(
        task_id=trajectory.task_id,
        trajectory_id=trajectory.trajectory_id,
        advantage=float(advantage),
        segments=segments_from_history(trajectory.dialogue.history),
        reward_raw=trajectory.raw_reward,
        reward_discounted=trajectory.discounted_reward,
        success_turn=trajectory.success_turn,
        seed=trajectory.seed,
        policy_version=trajectory.policy_version,
        history_sha256=history_sha256((u.role, u.text) for u in trajectory.dialogue.history),
    )


def write_records(records: Iterable[TrainingRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_records(path) -> list[TrainingRecord]:
    with open(path, encoding="utf-8") as fh:
        return [TrainingRecord.from_dict(json.loads(line)) for line in fh if line.strip()]
