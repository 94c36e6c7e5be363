"""Exception types shared across the engine."""

from __future__ import annotations


class SMLError(Exception):
    """Base class for all engine errors."""


class StepOnTerminated(SMLError):
    """A step was requested on a dialogue that already ended."""


class PolicyFailure(SMLError):
    """A policy could not produce an utterance (remote unreachable, bad reply)."""


class TeacherFailure(PolicyFailure):
    pass


class StudentFailure(PolicyFailure):
    pass


class RemoteFailure(PolicyFailure):
    """A remote endpoint could not be used (connection error, HTTP error status)."""


class RemoteTimeout(RemoteFailure):
    pass


class RemoteMalformed(RemoteFailure):
    pass


class NotScoringCapable(SMLError):
    pass


class MalformedChecker(SMLError):
    pass


class AbortedTrajectory(SMLError):
    """Rewards were requested for a trajectory that was aborted."""


class GroupTooSmall(SMLError):
    pass


class GroupAbort(SMLError):
    """Too many episodes in a rollout group aborted; the group is dropped."""

    def __init__(self, task_id: str, aborted: int):
        super().__init__(f"group for task {task_id!r} dropped after {aborted} aborted episodes")
        self.task_id = task_id
        self.aborted = aborted


class NonFiniteGradient(SMLError):
    pass


class EmptyDataset(SMLError):
    """No trajectory survived filtering; carries the would-be dataset for reporting."""

    def __init__(self, dataset):
        stats = dataset.provenance
        super().__init__(f"no successful trajectories (generated={stats['generated']}, kept=0)")
        self.dataset = dataset


class LeakedAnswer(SMLError):
    pass


class ConfigError(SMLError):
    pass
