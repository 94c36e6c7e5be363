"""Task instances, checker specs and the task-file format."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Iterable, Union

import numpy as np

from ..dialogue import EMPTY, GROUND_TRUTH, KNOWLEDGE_KINDS, SHARD_QUEUE, VERIFIER_LOG, PrivateKnowledge
from ..errors import MalformedChecker

FEEDBACK_STYLES = ("higher_lower", "parity", "none")


@dataclass(frozen=True)
class ExactAnswer:
    answer: str
    type = "exact_answer"

    def answer_text(self) -> str:
        return self.answer

    def to_dict(self):
        return {"type": self.type, "answer": self.answer}


@dataclass(frozen=True)
class NumericAnswer:
    answer: float
    tolerance: float = 1e-6
    type = "numeric_answer"

    def answer_text(self) -> str:
        return format_number(self.answer)

    def to_dict(self):
        return {"type": self.type, "answer": self.answer, "tolerance": self.tolerance}


@dataclass(frozen=True)
class ExpressionTests:
    """Held (input, expected output) pairs for a one-variable arithmetic expression."""

    tests: tuple[tuple[int, int], ...]
    variable: str = "x"
    reference: str | None = None
    type = "expression_tests"

    def answer_text(self) -> str:
        return self.reference or ""

    def to_dict(self):
        return {
            "type": self.type,
            "tests": [list(t) for t in self.tests],
            "variable": self.variable,
            "reference": self.reference,
        }


@dataclass(frozen=True)
class ToyGuessTask:
    """Guess a secret integer in [0, M); the teacher says higher or lower."""

    secret: int
    M: int = 64
    feedback_style: str = "higher_lower"
    type = "toy_guess"

    def __post_init__(self):
        if not 0 <= self.secret < self.M:
            raise MalformedChecker(f"secret {self.secret} outside [0, {self.M})")
        if self.feedback_style not in FEEDBACK_STYLES:
            raise MalformedChecker(f"unknown feedback_style {self.feedback_style!r}")

    def answer_text(self) -> str:
        return str(self.secret)

    def to_dict(self):
        return {"type": self.type, "secret": self.secret, "M": self.M, "feedback_style": self.feedback_style}


CheckerSpec = Union[ExactAnswer, NumericAnswer, ExpressionTests, ToyGuessTask]


def checker_from_dict(d: dict[str, Any]) -> CheckerSpec:
    try:
        kind = d["type"]
        if kind == "exact_answer":
            return ExactAnswer(str(d["answer"]))
        if kind == "numeric_answer":
            return NumericAnswer(float(d["answer"]), float(d.get("tolerance", 1e-6)))
        if kind == "expression_tests":
            tests = tuple((int(a), int(b)) for a, b in d["tests"])
            if not tests:
                raise MalformedChecker("expression_tests needs at least one test")
            return ExpressionTests(tests, d.get("variable", "x"), d.get("reference"))
        if kind == "toy_guess":
            return ToyGuessTask(int(d["secret"]), int(d.get("M", 64)), d.get("feedback_style", "higher_lower"))
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedChecker(f"bad checker spec {d!r}: {exc}") from exc
    raise MalformedChecker(f"unknown checker type {d.get('type')!r}")


def format_number(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


@dataclass(frozen=True)
class TaskInstance:
    task_id: str
    problem_text: str
    checker: CheckerSpec
    private_kind: str = GROUND_TRUTH
    shards: tuple[str, ...] | None = None
    meta: dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.private_kind not in KNOWLEDGE_KINDS:
            raise MalformedChecker(f"unknown private kind {self.private_kind!r}")
        if self.shards is not None:
            object.__setattr__(self, "shards", tuple(self.shards))
            if len(self.shards) < 2:
                raise MalformedChecker("a sharded task needs at least 2 shards")
            if self.private_kind != SHARD_QUEUE:
                raise MalformedChecker("sharded tasks use shard_queue knowledge")
        elif self.private_kind == SHARD_QUEUE:
            raise MalformedChecker("shard_queue knowledge requires shards")

    @property
    def opening_text(self) -> str:
        return self.shards[0] if self.shards else self.problem_text

    @property
    def answer_text(self) -> str:
        return self.checker.answer_text()

    def effective_max_turns(self, max_turns: int) -> int:
        # one shard per teacher turn; exhaustion replaces the turn limit
        return len(self.shards) if self.shards else max_turns

    def initial_knowledge(self) -> PrivateKnowledge:
        if self.private_kind == GROUND_TRUTH:
            return PrivateKnowledge(GROUND_TRUTH, self.answer_text)
        if self.private_kind == VERIFIER_LOG:
            return PrivateKnowledge(VERIFIER_LOG, ())
        if self.private_kind == SHARD_QUEUE:
            return PrivateKnowledge(SHARD_QUEUE, self.shards[1:])
        return PrivateKnowledge.empty()

    def to_dict(self) -> dict[str, Any]:
        d = {
            "task_id": self.task_id,
            "problem_text": self.problem_text,
            "checker_spec": self.checker.to_dict(),
            "private_spec": {"kind": self.private_kind},
            "shards": list(self.shards) if self.shards else None,
        }
        if self.meta:
            d["meta"] = dict(self.meta)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> TaskInstance:
        shards = d.get("shards")
        private = d.get("private_spec") or {"kind": SHARD_QUEUE if shards else GROUND_TRUTH}
        problem = d.get("problem_text") or (shards[0] if shards else None)
        if problem is None:
            raise MalformedChecker(f"task {d.get('task_id')!r} has no problem_text")
        return cls(
            task_id=str(d["task_id"]),
            problem_text=problem,
            checker=checker_from_dict(d["checker_spec"]),
            private_kind=private["kind"],
            shards=tuple(shards) if shards else None,
            meta=dict(d.get("meta") or {}),
        )


def shard_wrap(task: TaskInstance, shards: Iterable[str], task_id: str | None = None) -> TaskInstance:
    """Turn a task into a lazy-user version whose statement arrives one shard per turn."""
    shards = tuple(shards)
    return TaskInstance(
        task_id=task_id or f"{task.task_id}:sharded",
        problem_text=shards[0] if shards else task.problem_text,
        checker=task.checker,
        private_kind=SHARD_QUEUE,
        shards=shards,
        meta=dict(task.meta),
    )


def load_tasks(path) -> list[TaskInstance]:
    tasks = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                tasks.append(TaskInstance.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, MalformedChecker) as exc:
                raise MalformedChecker(f"{path}:{lineno}: {exc}") from exc
    return tasks


def save_tasks(tasks: Iterable[TaskInstance], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in tasks:
            fh.write(json.dumps(t.to_dict(), ensure_ascii=False) + "\n")


def toy_problem_text(M: int) -> str:
    return (
        f"I am thinking of an integer between 0 and {M - 1}. "
        "Find it by replying with GUESS followed by a number; I will tell you whether to go higher or lower."
    )


def make_toy_tasks(n: int, M: int = 64, seed: int = 0, feedback_style: str = "higher_lower", prefix: str = "toy") -> list[TaskInstance]:
    rng = np.random.default_rng(seed)
    secrets = rng.integers(0, M, size=n)
    return [
        TaskInstance(f"{prefix}-{i:05d}", toy_problem_text(M), ToyGuessTask(int(s), M, feedback_style))
        for i, s in enumerate(secrets)
    ]


def make_expression_tasks(n: int, seed: int = 0, private_kind: str = VERIFIER_LOG, n_tests: int = 4) -> list[TaskInstance]:
    """Small 'write the function' tasks checked against held test pairs."""
    rng = np.random.default_rng(seed)
    tasks = []
    for i in range(n):
        a, b = (int(v) for v in rng.integers(-5, 6, size=2))
        ref = f"{a}*x + {b}"
        tests = tuple((x, a * x + b) for x in range(1, n_tests + 1))
        text = (
            "Write an arithmetic expression in x (integers, + - * / ^ and parentheses) for a hidden linear function. "
            "Give it on a line starting with ANSWER:."
        )
        tasks.append(TaskInstance(f"expr-{i:05d}", text, ExpressionTests(tests, "x", ref), private_kind))
    return tasks
