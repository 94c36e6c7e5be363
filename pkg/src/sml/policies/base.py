"""Policy interfaces.

A student policy maps an observation (role/text pairs) to an utterance. A
teacher policy additionally sees the full history and the private knowledge.
"""

from __future__ import annotations

from typing import TYPE_CHECKING, Sequence

import numpy as np

from ..errors import NotScoringCapable

if TYPE_CHECKING:
    from ..dialogue import Observation, PrivateKnowledge, Utterance
    from ..tasks.base import TaskInstance

SCRIPTED = "scripted"
REMOTE = "remote"
TOY_SOFTMAX = "toy_softmax"
REFERENCE_SNAPSHOT = "reference_snapshot"


class Policy:
    kind = SCRIPTED
    scoring_capable = False
    seed = 0
    default_temperature = 1.0

    def act(self, observation: Observation, temperature: float | None = None, rng: np.random.Generator | None = None) -> str:
        raise NotImplementedError

    def score(self, observation: Observation, target_text: str) -> float:
        raise NotScoringCapable(f"{type(self).__name__} cannot score text")

    def for_task(self, task: TaskInstance) -> Policy:
        """Hook for scripted test students that are built around a known task."""
        return self


class TeacherPolicy:
    kind = SCRIPTED
    seed = 0

    def reply(
        self,
        task: TaskInstance,
        history: Sequence[Utterance],
        knowledge: PrivateKnowledge,
        rng: np.random.Generator | None = None,
    ) -> str:
        raise NotImplementedError
