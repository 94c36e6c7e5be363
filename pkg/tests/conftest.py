from __future__ import annotations

import time

import pytest

import acceptance_report

from sml.grpo import GrpoConfig, train
from sml.policies import ToySoftmaxPolicy
from sml.tasks import TaskInstance, ToyGuessTask, make_toy_tasks
from sml.tasks.base import toy_problem_text
from sml.tasks.teacher import ScriptedTeacher

M = 64


@pytest.fixture
def teacher():
    return ScriptedTeacher()


@pytest.fixture
def toy_tasks():
    return make_toy_tasks(32, M=M, seed=11)


def all_secret_tasks(M: int = M, prefix: str = "all") -> list[TaskInstance]:
    return [TaskInstance(f"{prefix}-{s:02d}", toy_problem_text(M), ToyGuessTask(s, M)) for s in range(M)]


@pytest.fixture(scope="session")
def trained_policy():
    """GRPO-trained toy student: M=64, N=6, g=8, gamma=0.7, beta=0, 20,000 episodes."""
    policy = ToySoftmaxPolicy(M=M, seed=0)
    cfg = GrpoConfig(g=8, beta=0.0, learning_rate=4.0, batch_groups=2, N=6, seed=0)
    start = time.perf_counter()
    result = train(policy, make_toy_tasks(2000, M=M, seed=0), ScriptedTeacher(), cfg, episodes=20_000)
    policy.train_seconds = time.perf_counter() - start
    policy.train_result = result
    return policy


def pytest_terminal_summary(terminalreporter):
    if acceptance_report.LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(acceptance_report.LINES):
            terminalreporter.write_line(acceptance_report.LINES[n])
