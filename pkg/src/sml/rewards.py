"""Trajectory-level binary rewards with turn discounting."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import TYPE_CHECKING

from .errors import AbortedTrajectory

if TYPE_CHECKING:
    from .dialogue import Trajectory


@dataclass(frozen=True)
class RewardConfig:
    gamma: float = 0.7
    mode: str = "binary_terminal"
    # GRPO normalizes discounted rewards unless this is off
    use_discounted: bool = True

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.mode != "binary_terminal":
            raise ValueError(f"unsupported reward mode {self.mode!r}")


def discounted_reward(success_turn: int | None, gamma: float) -> float:
    """gamma ** (success_turn - 1); a first-turn success is undiscounted.

    The power is taken on the decimal value of gamma and rounded once, so
    0.7 at turn 3 gives 0.49 rather than 0.48999999999999994.
    """
    if success_turn is None:
        return 0.0
    if success_turn < 1:
        raise ValueError("success_turn is 1-based")
    return float(Fraction(repr(float(gamma))) ** (success_turn - 1))


def assign_reward(trajectory: Trajectory, config: RewardConfig | None = None) -> tuple[int, float]:
    config = config or RewardConfig()
    if trajectory.aborted:
        raise AbortedTrajectory(trajectory.trajectory_id)
    if not trajectory.dialogue.terminated:
        raise ValueError("trajectory has not terminated")
    if not trajectory.dialogue.success:
        return 0, 0.0
    return 1, discounted_reward(trajectory.dialogue.success_turn, config.gamma)


def group_reward(trajectory: Trajectory, config: RewardConfig) -> float:
    """The r_k fed to advantage normalization."""
    raw, disc = assign_reward(trajectory, config)
    return disc if config.use_discounted else float(raw)
