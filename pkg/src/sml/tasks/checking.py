"""Answer extraction and the task checker R(x, y)."""

from __future__ import annotations

import re
from dataclasses import dataclass

from ..errors import MalformedChecker
from . import expr
from .base import ExactAnswer, ExpressionTests, NumericAnswer, TaskInstance, ToyGuessTask, format_number

CORRECT = "correct"
INCORRECT = "incorrect"
NON_ATTEMPT = "non_attempt"

_ANSWER_LINE = re.compile(r"^[ \t]*ANSWER:[ \t]*(.*?)[ \t]*$", re.MULTILINE | re.IGNORECASE)
_BOXED = re.compile(r"\\boxed\{([^{}]*)\}")
_NUMBER = re.compile(r"[-+]?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?")
_GUESS = re.compile(r"\bGUESS\s+(-?\d+)\b", re.IGNORECASE)


@dataclass(frozen=True)
class CheckResult:
    verdict: str
    report: str
    extracted: str | None = None

    @property
    def correct(self) -> bool:
        return self.verdict == CORRECT


def extract_answer(text: str) -> str | None:
    """Last ``ANSWER:`` line, else last ``\\boxed{}``, else last number.

    A bare question (ends with "?") has no extractable number answer.
    """
    lines = [m for m in _ANSWER_LINE.findall(text) if m.strip()]
    if lines:
        return lines[-1].strip()
    boxed = _BOXED.findall(text)
    if boxed:
        return boxed[-1].strip()
    if text.rstrip().endswith("?"):
        return None
    numbers = _NUMBER.findall(text)
    return numbers[-1] if numbers else None


def extract_guess(text: str) -> int | None:
    found = _GUESS.findall(text)
    return int(found[-1]) if found else None


def normalize(text: str) -> str:
    return " ".join(text.split()).casefold().rstrip(".")


def _number(text: str) -> float | None:
    m = _NUMBER.findall(text)
    if not m:
        return None
    try:
        return float(m[-1])
    except ValueError:
        return None


def check(task: TaskInstance, utterance: str) -> CheckResult:
    """Pure function of (task, utterance)."""
    spec = task.checker
    if isinstance(spec, ToyGuessTask):
        v = extract_guess(utterance)
        if v is None:
            return CheckResult(NON_ATTEMPT, "no guess found")
        if v == spec.secret:
            return CheckResult(CORRECT, "correct", str(v))
        return CheckResult(INCORRECT, "higher" if v < spec.secret else "lower", str(v))

    found = extract_answer(utterance)
    if found is None:
        return CheckResult(NON_ATTEMPT, "no answer found")

    if isinstance(spec, ExactAnswer):
        if normalize(found) == normalize(spec.answer):
            return CheckResult(CORRECT, "correct", found)
        return CheckResult(INCORRECT, f"incorrect: concluded {found}", found)

    if isinstance(spec, NumericAnswer):
        x = _number(found)
        if x is None:
            return CheckResult(INCORRECT, f"incorrect: {found} is not a number", found)
        if abs(x - spec.answer) <= spec.tolerance:
            return CheckResult(CORRECT, "correct", found)
        side = "too high" if x > spec.answer else "too low"
        return CheckResult(INCORRECT, f"incorrect: {format_number(x)} is {side}", found)

    if isinstance(spec, ExpressionTests):
        try:
            expr.parse(found, spec.variable)
        except expr.ExpressionError as exc:
            return CheckResult(INCORRECT, f"could not evaluate expression: {exc}", found)
        for i, (x_in, expected) in enumerate(spec.tests, 1):
            try:
                got = expr.evaluate(found, x_in, spec.variable)
            except expr.ExpressionError as exc:
                return CheckResult(INCORRECT, f"test {i} failed: {spec.variable}={x_in} raised {exc}", found)
            if got != expected:
                return CheckResult(
                    INCORRECT, f"test {i} failed: expected {expected} got {expr.format_value(got)}", found
                )
        return CheckResult(CORRECT, f"all {len(spec.tests)} tests passed", found)

    raise MalformedChecker(f"unsupported checker {type(spec).__name__}")
