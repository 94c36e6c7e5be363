from __future__ import annotations

from .base import (
    ExactAnswer,
    ExpressionTests,
    NumericAnswer,
    TaskInstance,
    ToyGuessTask,
    load_tasks,
    make_expression_tasks,
    make_toy_tasks,
    save_tasks,
    shard_wrap,
)
from .checking import CORRECT, INCORRECT, NON_ATTEMPT, CheckResult, check, extract_answer

__all__ = [
    "CORRECT", "INCORRECT", "NON_ATTEMPT", "CheckResult", "ExactAnswer", "ExpressionTests", "NumericAnswer",
    "TaskInstance", "ToyGuessTask", "check", "extract_answer", "load_tasks", "make_expression_tasks",
    "make_toy_tasks", "save_tasks", "shard_wrap",
]
