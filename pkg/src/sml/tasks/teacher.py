"""Template-based scripted teacher."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..dialogue import EMPTY, GROUND_TRUTH, SHARD_QUEUE, STUDENT, VERIFIER_LOG, Message, PrivateKnowledge, Utterance
from ..policies.base import TeacherPolicy
from .base import ExactAnswer, ExpressionTests, NumericAnswer, TaskInstance, ToyGuessTask
from .checking import CORRECT, NON_ATTEMPT, check
from .toy import midpoint_hint, read_toy

STYLES = ("corrective", "terse")


def _last_verdict(task: TaskInstance, last: Utterance):
    verdict = last.meta.get("verdict")
    report = last.meta.get("report")
    if verdict is None:
        r = check(task, last.text)
        verdict, report = r.verdict, r.report
    return verdict, report


def scripted_teacher_reply(
    task: TaskInstance,
    history: Sequence[Utterance],
    knowledge: PrivateKnowledge,
    style: str = "corrective",
) -> str:
    if not history or history[-1].role != STUDENT:
        raise ValueError("the teacher replies to a student utterance")
    last = history[-1]

    if knowledge.kind == SHARD_QUEUE:
        # lazy user: the next shard, verbatim, nothing else
        return knowledge.payload[0] if knowledge.payload else "That is everything I can tell you."
    if knowledge.kind == VERIFIER_LOG:
        return knowledge.payload[-1] if knowledge.payload else "No verifier output yet."
    if knowledge.kind == EMPTY:
        return "That is not right yet. Please try again."

    verdict, report = _last_verdict(task, last)
    if verdict == CORRECT:
        return "Correct."
    spec = task.checker
    terse = style == "terse"

    if isinstance(spec, ToyGuessTask):
        if verdict == NON_ATTEMPT:
            view = read_toy([Message(u.role, u.text) for u in history], spec.M)
            return midpoint_hint(spec.secret, view.lo, view.hi)
        if spec.feedback_style == "higher_lower":
            return report
        if spec.feedback_style == "parity" and not terse:
            return f"incorrect; the number is {'even' if spec.secret % 2 == 0 else 'odd'}"
        return "incorrect"

    if verdict == NON_ATTEMPT:
        return (
            "I can't give you the answer directly. Work through the problem and state your final answer "
            "on a line starting with ANSWER:."
        )
    if terse:
        return "Incorrect."
    concluded = check(task, last.text).extracted
    if isinstance(spec, NumericAnswer):
        return f"Incorrect: {report.split(': ', 1)[-1]}. Re-examine the step where you concluded {concluded}."
    if isinstance(spec, (ExactAnswer, ExpressionTests)):
        return f"Incorrect. Re-examine the step where you concluded {concluded}."
    return "Incorrect."


class ScriptedTeacher(TeacherPolicy):
    kind = "scripted"

    def __init__(self, style: str = "corrective", seed: int = 0):
        if style not in STYLES:
            raise ValueError(f"unknown teacher style {style!r}")
        self.style = style
        self.seed = seed

    def reply(self, task, history, knowledge, rng: np.random.Generator | None = None) -> str:
        return scripted_teacher_reply(task, history, knowledge, self.style)
