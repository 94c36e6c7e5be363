"""Deterministic scripted students used by tests, demos and baselines.

The oracle-style students are bound to a task through ``for_task`` and read
its answer directly. They exist to drive the episode machinery into known
outcomes, not to model a learner.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..tasks.base import ExactAnswer, ExpressionTests, NumericAnswer, TaskInstance, ToyGuessTask, format_number
from ..tasks.toy import ASK_TEXT, read_toy
from .base import Policy

CLARIFY_TEXT = "Could you tell me more about the problem?"


def correct_answer(task: TaskInstance) -> str:
    spec = task.checker
    if isinstance(spec, ToyGuessTask):
        return f"GUESS {spec.secret}"
    if isinstance(spec, ExpressionTests):
        if not spec.reference:
            raise ValueError(f"task {task.task_id} has no reference expression")
        return f"ANSWER: {spec.reference}"
    return f"ANSWER: {spec.answer_text()}"


def wrong_answer(task: TaskInstance) -> str:
    spec = task.checker
    if isinstance(spec, ToyGuessTask):
        return f"GUESS {(spec.secret + 1) % spec.M}"
    if isinstance(spec, NumericAnswer):
        return f"ANSWER: {format_number(spec.answer + 1 + 10 * spec.tolerance)}"
    if isinstance(spec, ExpressionTests):
        return f"ANSWER: ({spec.reference or 'x'}) + 1"
    if isinstance(spec, ExactAnswer):
        return f"ANSWER: not {spec.answer}"
    raise ValueError(f"no wrong answer for {type(spec).__name__}")


class FixedReply(Policy):
    def __init__(self, text: str, seed: int = 0):
        self.text = text
        self.seed = seed

    def act(self, observation, temperature=None, rng=None) -> str:
        return self.text


class SequenceReply(Policy):
    """The t-th student turn says ``replies[t-1]``; the last reply repeats."""

    def __init__(self, replies: Sequence[str], seed: int = 0):
        if not replies:
            raise ValueError("need at least one reply")
        self.replies = list(replies)
        self.seed = seed

    def act(self, observation, temperature=None, rng=None) -> str:
        t = sum(1 for role, _ in observation if role == "student")
        return self.replies[min(t, len(self.replies) - 1)]


class FunctionPolicy(Policy):
    def __init__(self, fn: Callable, seed: int = 0):
        self.fn = fn
        self.seed = seed

    def act(self, observation, temperature=None, rng=None) -> str:
        return self.fn(observation)


class _TaskBound(Policy):
    def __init__(self, seed: int = 0, task: TaskInstance | None = None):
        self.seed = seed
        self.task = task

    def for_task(self, task):
        return type(self)(seed=self.seed, task=task, **self._extra())

    def _extra(self) -> dict:
        return {}

    def _task(self) -> TaskInstance:
        if self.task is None:
            raise RuntimeError(f"{type(self).__name__} must be bound with for_task()")
        return self.task


class OracleStudent(_TaskBound):
    def act(self, observation, temperature=None, rng=None) -> str:
        return correct_answer(self._task())


class AlwaysWrongStudent(_TaskBound):
    def act(self, observation, temperature=None, rng=None) -> str:
        return wrong_answer(self._task())


class TaskConditionalStudent(_TaskBound):
    """Oracle on tasks where ``predicate(task)`` holds, always wrong elsewhere."""

    def __init__(self, predicate: Callable[[TaskInstance], bool], seed: int = 0, task=None):
        super().__init__(seed, task)
        self.predicate = predicate

    def _extra(self):
        return {"predicate": self.predicate}

    def act(self, observation, temperature=None, rng=None) -> str:
        task = self._task()
        return correct_answer(task) if self.predicate(task) else wrong_answer(task)


class WaitForShardsStudent(_TaskBound):
    """Asks for clarification until ``k`` teacher utterances are visible, then answers correctly."""

    def __init__(self, k: int, seed: int = 0, task=None):
        super().__init__(seed, task)
        self.k = k

    def _extra(self):
        return {"k": self.k}

    def act(self, observation, temperature=None, rng=None) -> str:
        heard = sum(1 for role, _ in observation if role == "teacher")
        return correct_answer(self._task()) if heard >= self.k else CLARIFY_TEXT


class BisectStudent(Policy):
    """Optimal guessing-game play from the public transcript alone."""

    def __init__(self, M: int = 64, seed: int = 0):
        self.M = M
        self.seed = seed

    def act(self, observation, temperature=None, rng=None) -> str:
        return f"GUESS {read_toy(observation, self.M).midpoint}"


class RandomConsistentStudent(Policy):
    """Guesses uniformly inside the interval consistent with feedback so far."""

    def __init__(self, M: int = 64, seed: int = 0, ask_probability: float = 0.0):
        self.M = M
        self.seed = seed
        self.ask_probability = ask_probability

    def act(self, observation, temperature=None, rng=None) -> str:
        rng = rng if rng is not None else np.random.default_rng(self.seed)
        if self.ask_probability and rng.random() < self.ask_probability:
            return ASK_TEXT
        view = read_toy(observation, self.M)
        return f"GUESS {int(rng.integers(view.lo, view.hi + 1))}"


SCRIPTED_STRATEGIES = {
    "oracle": OracleStudent,
    "always_wrong": AlwaysWrongStudent,
    "bisect": BisectStudent,
    "random_consistent": RandomConsistentStudent,
}
