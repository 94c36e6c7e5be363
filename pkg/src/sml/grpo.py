"""Online RL with group-relative advantages.

A group is g dialogues on one task. Every student action in a dialogue gets
that dialogue's normalized reward as its advantage, and the toy policy ascends

    J(theta) = (1/K) sum_k A_k sum_t log pi(a_kt | o_kt) - beta * mean_o KL(pi(.|o) || pi_ref(.|o))

where K counts trajectories in the batch and the KL mean runs over every
visited student observation. Updates are plain SGD.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dialogue import Trajectory, run_episodes, student_decisions
from .errors import GroupAbort, GroupTooSmall, NonFiniteGradient
from .records import TrainingRecord, record_from_trajectory, write_records
from .rewards import RewardConfig, group_reward
from .seeding import derive_seed

logger = logging.getLogger(__name__)


def advantages(rewards: Sequence[float]) -> np.ndarray:
    """(r - mean) / std with the population std; a constant group gets zeros.

    Mean and deviations are computed exactly, so adding a constant that keeps
    every reward representable leaves the result bit-for-bit unchanged.
    """
    r = np.asarray(rewards, dtype=float)
    if r.ndim != 1 or r.size < 2:
        raise GroupTooSmall(f"need at least 2 rewards, got {r.size}")
    if not np.all(np.isfinite(r)):
        raise ValueError("rewards must be finite")
    # every double is an integer over a power of two: put all on a common denominator
    ratios = [float(x).as_integer_ratio() for x in r]
    denom = max(d for _, d in ratios)
    nums = [a * (denom // d) for a, d in ratios]
    n = len(nums)
    total = sum(nums)
    dev = [n * a - total for a in nums]  # n * denom * (r_k - mean)
    ss = sum(d * d for d in dev)
    if ss == 0:
        return np.zeros_like(r)
    # A_k = d_k / sqrt(ss / n); int / int division rounds once and never overflows
    return np.array([math.sqrt(n * d * d / ss) * (1 if d > 0 else -1 if d < 0 else 0) for d in dev])


@dataclass(frozen=True)
class GrpoConfig:
    g: int = 8
    beta: float = 0.0
    learning_rate: float = 4.0
    batch_groups: int = 2
    N: int = 4
    temperature: float = 1.0
    seed: int = 0
    max_resample: int | None = None  # defaults to g
    reward: RewardConfig = field(default_factory=RewardConfig)

    def __post_init__(self):
        if self.g < 2:
            raise ValueError("g must be >= 2")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.batch_groups < 1:
            raise ValueError("batch_groups must be >= 1")
        if self.N < 1:
            raise ValueError("N must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class RolloutGroup:
    task_id: str
    trajectories: tuple[Trajectory, ...]
    rewards: np.ndarray
    advantages: np.ndarray
    policy_version: int = 0
    resampled: int = 0

    def __post_init__(self):
        if len(self.trajectories) < 2:
            raise GroupTooSmall("a rollout group needs at least 2 trajectories")
        if any(t.task_id != self.task_id for t in self.trajectories):
            raise ValueError("all trajectories in a group share the task")
        if any(t.aborted for t in self.trajectories):
            raise ValueError("aborted trajectories never enter a group")

    @property
    def g(self) -> int:
        return len(self.trajectories)


def rollout_group(task, student, teacher, config: GrpoConfig, group_index: int = 0, workers: int = 1) -> RolloutGroup:
    """g episodes with distinct derived seeds; aborted ones are re-sampled up to a cap."""
    cap = config.g if config.max_resample is None else config.max_resample
    version = getattr(student, "version", 0)
    kept: list[Trajectory] = []
    n_tried = 0
    aborted = 0
    while len(kept) < config.g:
        need = config.g - len(kept)
        if n_tried >= config.g and aborted > cap:
            break
        seeds = [derive_seed("grpo", config.seed, task.task_id, group_index, n_tried + i) for i in range(need)]
        n_tried += need
        trs = run_episodes(
            [(task, s) for s in seeds], student, teacher, config.N, config.reward, config.temperature, workers
        )
        for tr in trs:
            if tr.aborted:
                aborted += 1
            else:
                kept.append(tr)
    if len(kept) < config.g:
        raise GroupAbort(task.task_id, aborted)
    kept = kept[: config.g]
    rewards = np.array([group_reward(t, config.reward) for t in kept])
    return RolloutGroup(task.task_id, tuple(kept), rewards, advantages(rewards), version, aborted)


# surrogate objective


def _decisions(policy, groups: Sequence[RolloutGroup]):
    """[(A_k, [(features, action index), ...]), ...] over every trajectory."""
    out = []
    for grp in groups:
        for tr, a_k in zip(grp.trajectories, grp.advantages):
            steps = []
            for obs, text in student_decisions(tr):
                a = policy.action_index(text)
                if a is None:
                    raise ValueError(f"{tr.trajectory_id}: {text!r} is not an action of this policy")
                steps.append((policy.features(obs), a))
            out.append((float(a_k), steps))
    return out


def _log_softmax(z):
    z = z - z.max()
    return z - np.log(np.exp(z).sum())


def surrogate_from_decisions(policy, decisions, beta: float, reference=None, theta=None) -> float:
    theta = policy.theta if theta is None else theta
    enc = policy.encoder
    pg = 0.0
    kl_sum = 0.0
    n_obs = 0
    for a_k, steps in decisions:
        for feats, a in steps:
            lp = _log_softmax(enc.logits(theta, feats))
            pg += a_k * lp[a]
            if beta > 0:
                lq = _log_softmax(reference.encoder.logits(reference.theta, feats))
                kl_sum += float(np.exp(lp) @ (lp - lq))
            n_obs += 1
    value = pg / max(len(decisions), 1)
    if beta > 0 and n_obs:
        value -= beta * kl_sum / n_obs
    return float(value)


def gradient_from_decisions(policy, decisions, beta: float, reference=None) -> tuple[np.ndarray, float]:
    """Analytic surrogate gradient, and the mean KL to the reference over visited observations."""
    grad = np.zeros_like(policy.theta)
    kl_grad = np.zeros_like(policy.theta)
    kl_sum = 0.0
    n_obs = 0
    for a_k, steps in decisions:
        for feats, a in steps:
            if a_k != 0.0:
                grad += a_k * policy.grad_log_prob(feats, a)
            if reference is not None:
                kl, g = policy.kl_and_grad(feats, reference)
                kl_sum += kl
                if beta > 0:
                    kl_grad += g
            n_obs += 1
    grad /= max(len(decisions), 1)
    if beta > 0 and n_obs:
        grad -= beta * kl_grad / n_obs
    return grad, (kl_sum / n_obs if n_obs else 0.0)


def surrogate(policy, groups, beta: float = 0.0, reference=None, theta=None) -> float:
    return surrogate_from_decisions(policy, _decisions(policy, groups), beta, reference, theta)


def surrogate_gradient(policy, groups, beta: float = 0.0, reference=None) -> np.ndarray:
    return gradient_from_decisions(policy, _decisions(policy, groups), beta, reference)[0]


@dataclass(frozen=True)
class StepReport:
    step: int
    episodes: int
    n_groups: int
    mean_reward: float
    mean_raw_reward: float
    mean_abs_advantage: float
    kl: float
    grad_norm: float
    policy_version: int

    def to_dict(self) -> dict:
        return asdict(self)


def policy_gradient_step(policy, groups: Sequence[RolloutGroup], config: GrpoConfig, reference=None, step: int = 0,
                         episodes: int = 0, dump_path=None) -> StepReport:
    """One SGD ascent step on the surrogate. KL is measured before the update."""
    if not groups:
        raise ValueError("policy_gradient_step needs at least one group")
    if config.beta > 0 and reference is None:
        raise ValueError("beta > 0 needs a reference policy")
    decisions = _decisions(policy, groups)
    grad, kl = gradient_from_decisions(policy, decisions, config.beta, reference)
    norm = float(np.linalg.norm(grad))
    if not np.all(np.isfinite(grad)):
        if dump_path is not None:
            np.savez(dump_path, theta=policy.theta, grad=grad)
        raise NonFiniteGradient(f"non-finite gradient at step {step}" + (f"; state dumped to {dump_path}" if dump_path else ""))
    policy.update(config.learning_rate * grad)
    rewards = np.concatenate([g.rewards for g in groups])
    raw = np.array([t.raw_reward for g in groups for t in g.trajectories], dtype=float)
    adv = np.concatenate([g.advantages for g in groups])
    return StepReport(
        step=step,
        episodes=episodes,
        n_groups=len(groups),
        mean_reward=float(rewards.mean()),
        mean_raw_reward=float(raw.mean()),
        mean_abs_advantage=float(np.abs(adv).mean()),
        kl=float(kl),
        grad_norm=norm,
        policy_version=policy.version,
    )


def export_rl_batch(groups: Sequence[RolloutGroup], path) -> list[TrainingRecord]:
    records = [
        record_from_trajectory(tr, a_k) for grp in groups for tr, a_k in zip(grp.trajectories, grp.advantages)
    ]
    write_records(records, path)
    return records


@dataclass
class TrainResult:
    reports: list[StepReport]
    dropped: list[str]
    episodes: int
    evaluations: list[tuple[int, object]] = field(default_factory=list)


def train(
    policy,
    tasks,
    teacher,
    config: GrpoConfig,
    episodes: int,
    reference=None,
    workers: int = 1,
    eval_every: int | None = None,
    evaluate: Callable | None = None,
    on_step: Callable[[StepReport], None] | None = None,
    dump_path=None,
) -> TrainResult:
    """GRPO until the episode budget is spent.

    Each step rolls out ``batch_groups`` groups on tasks drawn with the config
    seed. A reference snapshot is taken at the start when none is given, so the
    reported KL is always to the initial policy.
    """
    if not tasks:
        raise ValueError("no training tasks")
    reference = reference if reference is not None else policy.snapshot()
    rng = np.random.default_rng(derive_seed("grpo-tasks", config.seed))
    spent = 0
    step = 0
    group_index = 0
    result = TrainResult([], [], 0)
    if evaluate is not None and eval_every:
        result.evaluations.append((0, evaluate(policy)))
    next_eval = eval_every or 0
    while spent < episodes:
        groups = []
        for _ in range(config.batch_groups):
            task = tasks[int(rng.integers(len(tasks)))]
            try:
                grp = rollout_group(task, policy, teacher, config, group_index, workers)
                groups.append(grp)
                spent += grp.g + grp.resampled
            except GroupAbort as exc:
                logger.warning("%s", exc)
                result.dropped.append(exc.task_id)
                spent += config.g + exc.aborted
            group_index += 1
        if groups:
            step += 1
            report = policy_gradient_step(policy, groups, config, reference, step, spent, dump_path)
            result.reports.append(report)
            if on_step is not None:
                on_step(report)
        if evaluate is not None and eval_every and spent >= next_eval:
            result.evaluations.append((spent, evaluate(policy)))
            next_eval += eval_every
    result.episodes = spent
    return result
