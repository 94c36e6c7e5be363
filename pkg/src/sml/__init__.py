"""Teacher-student dialogue RL engine: rollouts, rewards, GRPO, filtered SFT, question priming and probes."""

from __future__ import annotations

__version__ = "0.1.0"
