"""Generate, keep the successes, export student turns for supervised finetuning.

Single iteration only. Every successful sample of a task is kept, except that
byte-identical dialogues are collapsed by default.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .dialogue import STUDENT, TEACHER, Trajectory, run_episodes, student_decisions
from .errors import EmptyDataset
from .records import TrainingRecord, history_sha256, record_from_trajectory, read_records, write_records
from .rewards import RewardConfig, assign_reward
from .seeding import derive_seed


@dataclass
class SftDataset:
    records: list[TrainingRecord]
    provenance: dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def task_ids(self) -> list[str]:
        return [r.task_id for r in self.records]


def run_id_for(*parts) -> str:
    return f"{derive_seed('run', *parts):016x}"


def generate(tasks, student, teacher, samples_per_task: int, N: int, seed: int, reward_config=None, workers: int = 1,
             temperature: float | None = None) -> list[Trajectory]:
    if samples_per_task < 1:
        raise ValueError("samples_per_task must be >= 1")
    jobs = [(t, derive_seed("offline", seed, t.task_id, k)) for t in tasks for k in range(samples_per_task)]
    return run_episodes(jobs, student, teacher, N, reward_config, temperature, workers)


def filter_trajectories(trajectories: Sequence[Trajectory], run_id: str = "", dedup: bool = True,
                        reward_config: RewardConfig | None = None) -> SftDataset:
    """Keep completed trajectories with raw reward 1 and export them with advantage 1."""
    records = []
    seen = set()
    aborted = passed = duplicates = 0
    for tr in trajectories:
        if tr.aborted:
            aborted += 1
            continue
        raw, _ = assign_reward(tr, reward_config)
        if raw != 1:
            continue
        passed += 1
        if dedup:
            key = (tr.task_id, history_sha256((u.role, u.text) for u in tr.dialogue.history))
            if key in seen:
                duplicates += 1
                continue
            seen.add(key)
        records.append(record_from_trajectory(tr, 1.0))
    generated = len(trajectories)
    provenance = {
        "run_id": run_id,
        "generated": generated,
        "aborted": aborted,
        "passed": passed,
        "deduplicated": duplicates,
        "kept": len(records),
        "kept_rate": len(records) / generated if generated else 0.0,
        "dedup": dedup,
    }
    return SftDataset(records, provenance)


def generate_and_filter(tasks, student, teacher, samples_per_task: int, N: int, seed: int, reward_config=None,
                        dedup: bool = True, workers: int = 1, temperature: float | None = None,
                        return_trajectories: bool = False):
    """Raises EmptyDataset (carrying the empty dataset and its stats) when nothing succeeded."""
    trajectories = generate(tasks, student, teacher, samples_per_task, N, seed, reward_config, workers, temperature)
    run_id = run_id_for("sft", seed, N, samples_per_task, *[t.task_id for t in tasks])
    dataset = filter_trajectories(trajectories, run_id, dedup, reward_config)
    dataset.provenance.update({"seed": seed, "N": N, "samples_per_task": samples_per_task})
    if not dataset.records:
        raise EmptyDataset(dataset)
    return (dataset, trajectories) if return_trajectories else dataset


def provenance_path(path) -> str:
    return f"{path}.provenance.json"


def write_dataset(dataset: SftDataset, path) -> None:
    write_records(dataset.records, path)
    with open(provenance_path(path), "w", encoding="utf-8") as fh:
        json.dump(dataset.provenance, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_dataset(path) -> SftDataset:
    records = read_records(path)
    try:
        with open(provenance_path(path), encoding="utf-8") as fh:
            provenance = json.load(fh)
    except FileNotFoundError:
        provenance = {}
    return SftDataset(records, provenance)


@dataclass(frozen=True)
class Violation:
    trajectory_id: str
    problem: str


@dataclass
class AuditReport:
    checked: int
    violations: list[Violation]

    @property
    def ok(self) -> bool:
        return not self.violations


def mask_audit(dataset: SftDataset | Sequence[TrainingRecord], trajectories: Sequence[Trajectory] | None = None) -> AuditReport:
    """Check loss masks and that segments reproduce the source dialogue.

    With ``trajectories`` the segments are compared with the source history
    directly; otherwise with the history hash stored at export.
    """
    records = dataset.records if isinstance(dataset, SftDataset) else list(dataset)
    sources = {t.trajectory_id: t for t in trajectories} if trajectories is not None else None
    violations = []
    for rec in records:
        tid = rec.trajectory_id
        for i, seg in enumerate(rec.segments):
            if seg.role == STUDENT and not seg.train:
                violations.append(Violation(tid, f"segment {i}: student segment has train=false"))
            elif seg.role == TEACHER and seg.train:
                violations.append(Violation(tid, f"segment {i}: teacher segment has train=true"))
            elif seg.role not in (STUDENT, TEACHER):
                violations.append(Violation(tid, f"segment {i}: unknown role {seg.role!r}"))
        if sources is not None:
            src = sources.get(tid)
            if src is None:
                violations.append(Violation(tid, "source trajectory not found"))
            elif [(u.role, u.text) for u in src.dialogue.history] != [(s.role, s.text) for s in rec.segments]:
                violations.append(Violation(tid, "segments do not reproduce the source dialogue"))
        elif rec.history_sha256 is not None and rec.history_sha256 != rec.segments_sha256():
            violations.append(Violation(tid, "segments do not match the recorded history hash"))
    return AuditReport(len(records), violations)


def bc_loss_and_grad(policy, records: Sequence[TrainingRecord]) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of the toy policy on train=true segments, and its gradient."""
    grad = np.zeros_like(policy.theta)
    loss = 0.0
    n = 0
    for rec in records:
        prefix = []
        for seg in rec.segments:
            if seg.train and seg.role == STUDENT:
                a = policy.action_index(seg.text)
                if a is not None:
                    feats = policy.features(tuple(prefix))
                    z = policy.encoder.logits(policy.theta, feats)
                    z = z - z.max()
                    loss -= z[a] - np.log(np.exp(z).sum())
                    grad -= policy.grad_log_prob(feats, a)
                    n += 1
            prefix.append((seg.role, seg.text))
    if n == 0:
        return 0.0, grad
    return float(loss / n), grad / n


def behavior_clone(policy, records: Sequence[TrainingRecord], learning_rate: float = 1.0, steps: int = 100) -> list[float]:
    """Full-batch gradient descent on the cross-entropy; returns the loss before each step."""
    losses = []
    for _ in range(steps):
        loss, grad = bc_loss_and_grad(policy, records)
        losses.append(loss)
        policy.update(-learning_rate * grad)
    return losses


def recompute_raw_reward(trajectory: Trajectory, task) -> int:
    """Re-check the stored student turns against the task; 1 iff one of them is correct."""
    from .tasks.checking import check

    return int(any(check(task, text).correct for _, text in student_decisions(trajectory)))
