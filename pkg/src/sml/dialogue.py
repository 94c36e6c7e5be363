"""Teacher-student dialogue state machine.

A dialogue state is the public conversation plus the teacher's private
knowledge. The student only ever sees the conversation, via :func:`observe`.
Every value here is immutable; :func:`step` returns a new state.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Any, Iterable, NamedTuple, Sequence

import numpy as np

from .errors import PolicyFailure, StepOnTerminated, TeacherFailure
from .rewards import RewardConfig, discounted_reward

if TYPE_CHECKING:
    from .policies.base import Policy, TeacherPolicy
    from .tasks.base import TaskInstance

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

TEACHER = "teacher"
STUDENT = "student"

GROUND_TRUTH = "ground_truth"
VERIFIER_LOG = "verifier_log"
SHARD_QUEUE = "shard_queue"
EMPTY = "empty"
KNOWLEDGE_KINDS = (GROUND_TRUTH, VERIFIER_LOG, SHARD_QUEUE, EMPTY)

COMPLETED = "completed"
ABORTED = "aborted"


class Message(NamedTuple):
    """One entry of a student-visible observation."""

    role: str
    text: str


Observation = tuple[Message, ...]


@dataclass(frozen=True)
class Utterance:
    role: str
    text: str
    turn_index: int
    meta: dict[str, Any] = field(default_factory=dict, compare=False)

    def to_dict(self) -> dict[str, Any]:
        return {"role": self.role, "text": self.text, "turn_index": self.turn_index, "meta": dict(self.meta)}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Utterance:
        return cls(d["role"], d["text"], int(d["turn_index"]), dict(d.get("meta") or {}))


@dataclass(frozen=True)
class PrivateKnowledge:
    """What the teacher knows and the student does not.

    ``payload`` is the answer string for ``ground_truth``, a tuple of verifier
    reports for ``verifier_log``, a tuple of unrevealed shards for
    ``shard_queue`` and ``None`` for ``empty``.
    """

    kind: str
    payload: Any = None

    def __post_init__(self):
        if self.kind not in KNOWLEDGE_KINDS:
            raise ValueError(f"unknown knowledge kind {self.kind!r}")
        if self.kind == EMPTY and self.payload not in (None, "", ()):
            raise ValueError("empty knowledge must have an empty payload")
        if self.kind in (VERIFIER_LOG, SHARD_QUEUE):
            object.__setattr__(self, "payload", tuple(self.payload or ()))

    @classmethod
    def empty(cls) -> PrivateKnowledge:
        return cls(EMPTY, None)

    def strings(self) -> list[str]:
        """All private strings, for hygiene checks."""
        if self.kind == GROUND_TRUTH:
            return [str(self.payload)]
        if self.kind in (VERIFIER_LOG, SHARD_QUEUE):
            return [str(p) for p in self.payload]
        return []

    def to_dict(self) -> dict[str, Any]:
        payload = list(self.payload) if isinstance(self.payload, tuple) else self.payload
        return {"kind": self.kind, "payload": payload}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> PrivateKnowledge:
        return cls(d["kind"], d.get("payload"))


@dataclass(frozen=True)
class DialogueState:
    history: tuple[Utterance, ...]
    knowledge: PrivateKnowledge
    turn: int = 1
    terminated: bool = False
    success: bool = False
    success_turn: int | None = None

    @property
    def student_turns(self) -> int:
        return sum(1 for u in self.history if u.role == STUDENT)

    def to_dict(self) -> dict[str, Any]:
        return {
            "history": [u.to_dict() for u in self.history],
            "knowledge": self.knowledge.to_dict(),
            "turn": self.turn,
            "terminated": self.terminated,
            "success": self.success,
            "success_turn": self.success_turn,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> DialogueState:
        return cls(
            history=tuple(Utterance.from_dict(u) for u in d["history"]),
            knowledge=PrivateKnowledge.from_dict(d["knowledge"]),
            turn=int(d["turn"]),
            terminated=bool(d["terminated"]),
            success=bool(d["success"]),
            success_turn=d.get("success_turn"),
        )


@dataclass(frozen=True)
class Trajectory:
    dialogue: DialogueState
    task_id: str
    raw_reward: int
    discounted_reward: float
    success_turn: int | None
    seed: int
    max_turns: int
    status: str = COMPLETED
    abort_reason: str | None = None
    policy_version: int = 0

    @property
    def trajectory_id(self) -> str:
        return f"{self.task_id}#{self.seed}"

    @property
    def aborted(self) -> bool:
        return self.status == ABORTED

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "trajectory_id": self.trajectory_id,
            "task_id": self.task_id,
            "seed": self.seed,
            "status": self.status,
            "abort_reason": self.abort_reason,
            "max_turns": self.max_turns,
            "raw_reward": self.raw_reward,
            "discounted_reward": self.discounted_reward,
            "success_turn": self.success_turn,
            "policy_version": self.policy_version,
            "dialogue": self.dialogue.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Trajectory:
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported trajectory schema {d.get('schema_version')!r}")
        return cls(
            dialogue=DialogueState.from_dict(d["dialogue"]),
            task_id=d["task_id"],
            raw_reward=int(d["raw_reward"]),
            discounted_reward=float(d["discounted_reward"]),
            success_turn=d.get("success_turn"),
            seed=int(d["seed"]),
            max_turns=int(d["max_turns"]),
            status=d.get("status", COMPLETED),
            abort_reason=d.get("abort_reason"),
            policy_version=int(d.get("policy_version", 0)),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False)


def observe(state: DialogueState) -> Observation:
    """Project a state onto what the student sees: roles and texts only."""
    return tuple(Message(u.role, u.text) for u in state.history)


def initial_state(task: TaskInstance) -> DialogueState:
    opening = Utterance(TEACHER, task.opening_text, 1)
    return DialogueState(history=(opening,), knowledge=task.initial_knowledge())


def step(
    state: DialogueState,
    student_utterance: str,
    teacher: TeacherPolicy,
    task: TaskInstance,
    max_turns: int,
    rng: np.random.Generator | None = None,
    teacher_reply: str | None = None,
) -> DialogueState:
    """Advance one turn: append and check the student's utterance, then let the teacher reply.

    ``teacher_reply`` splices in a known reply instead of sampling one; used when
    replaying a stored dialogue.
    """
    if state.terminated:
        raise StepOnTerminated(f"dialogue already ended at turn {state.turn}")
    if not student_utterance or not student_utterance.strip():
        raise ValueError("student utterance must be nonempty")

    from .tasks.checking import check

    t = state.turn
    result = check(task, student_utterance)
    student = Utterance(STUDENT, student_utterance, t, {"verdict": result.verdict, "report": result.report})
    history = state.history + (student,)

    knowledge = state.knowledge
    if knowledge.kind == VERIFIER_LOG:
        knowledge = PrivateKnowledge(VERIFIER_LOG, knowledge.payload + (result.report,))

    if result.correct:
        return replace(state, history=history, knowledge=knowledge, terminated=True, success=True, success_turn=t)
    if t >= max_turns:
        return replace(state, history=history, knowledge=knowledge, terminated=True, success=False)

    if teacher_reply is None:
        try:
            teacher_reply = teacher.reply(task, history, knowledge, rng=rng)
        except PolicyFailure as exc:
            raise TeacherFailure(f"teacher: {exc}") from exc
    if not teacher_reply:
        raise TeacherFailure("teacher returned an empty reply")
    if knowledge.kind == SHARD_QUEUE and knowledge.payload:
        knowledge = PrivateKnowledge(SHARD_QUEUE, knowledge.payload[1:])
    history = history + (Utterance(TEACHER, teacher_reply, t + 1),)
    return replace(state, history=history, knowledge=knowledge, turn=t + 1)


def episode_rng(policy_seed: int, episode_seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(policy_seed), int(episode_seed), stream])


def run_episode(
    task: TaskInstance,
    student: Policy,
    teacher: TeacherPolicy,
    max_turns: int,
    seed: int,
    reward_config: RewardConfig | None = None,
    temperature: float | None = None,
) -> Trajectory:
    """Play one dialogue to termination.

    Deterministic given the task, both policies' seeds and ``seed``. A policy
    failure ends the episode as an aborted trajectory rather than raising.
    """
    if max_turns < 1:
        raise ValueError("max_turns must be >= 1")
    reward_config = reward_config or RewardConfig()
    n = task.effective_max_turns(max_turns)
    student = student.for_task(task)
    s_rng = episode_rng(student.seed, seed, 0)
    t_rng = episode_rng(teacher.seed, seed, 1)

    state = initial_state(task)
    version = getattr(student, "version", 0)
    try:
        while not state.terminated:
            try:
                utterance = student.act(observe(state), temperature=temperature, rng=s_rng)
            except PolicyFailure as exc:
                raise PolicyFailure(f"student: {exc}") from exc
            if not utterance or not utterance.strip():
                raise PolicyFailure("student: empty utterance")
            state = step(state, utterance, teacher, task, n, rng=t_rng)
    except PolicyFailure as exc:
        logger.warning("episode %s#%s aborted: %s", task.task_id, seed, exc)
        return Trajectory(state, task.task_id, 0, 0.0, None, seed, n, ABORTED, str(exc), version)

    raw = 1 if state.success else 0
    return Trajectory(
        dialogue=state,
        task_id=task.task_id,
        raw_reward=raw,
        discounted_reward=discounted_reward(state.success_turn, reward_config.gamma) if raw else 0.0,
        success_turn=state.success_turn,
        seed=seed,
        max_turns=n,
        policy_version=version,
    )


def run_episodes(
    jobs: Sequence[tuple[TaskInstance, int]],
    student: Policy,
    teacher: TeacherPolicy,
    max_turns: int,
    reward_config: RewardConfig | None = None,
    temperature: float | None = None,
    workers: int = 1,
) -> list[Trajectory]:
    """Run ``(task, seed)`` jobs, in parallel when ``workers > 1``; output order follows ``jobs``."""

    def one(job):
        task, seed = job
        return run_episode(task, student, teacher, max_turns, seed, reward_config, temperature)

    if workers <= 1 or len(jobs) <= 1:
        return [one(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, jobs))


def student_decisions(trajectory: Trajectory) -> list[tuple[Observation, str]]:
    """(observation, student utterance) pairs in order, as the student saw them."""
    out = []
    history = trajectory.dialogue.history
    for i, u in enumerate(history):
        if u.role == STUDENT:
            out.append((tuple(Message(h.role, h.text) for h in history[:i]), u.text))
    return out


def write_trajectories(trajectories: Iterable[Trajectory], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tr in trajectories:
            fh.write(tr.to_json() + "\n")


def read_trajectories(path) -> list[Trajectory]:
    with open(path, encoding="utf-8") as fh:
        return [Trajectory.from_dict(json.loads(line)) for line in fh if line.strip()]
