"""Evaluation probes: success by turn, loss on the answer, turn-type labels."""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy import stats

from .dialogue import STUDENT, TEACHER, Message, Trajectory
from .errors import NotScoringCapable, PolicyFailure
from .tasks.checking import extract_answer, extract_guess

logger = logging.getLogger(__name__)

Z95 = 1.959963984540054

ANSWER_ATTEMPT = "answer_attempt"
CLARIFICATION_QUESTION = "clarification_question"
DISCUSSION = "discussion"
OTHER = "other"
LABELS = (ANSWER_ATTEMPT, CLARIFICATION_QUESTION, DISCUSSION, OTHER)


@dataclass(frozen=True)
class CurvePoint:
    turn: int
    cumulative_success_rate: float
    n: int
    ci95: float
    ci_low: float
    ci_high: float

    def to_dict(self) -> dict:
        return asdict(self)


def wilson_interval(k: int, n: int, z: float = Z95) -> tuple[float, float]:
    if n == 0:
        return 0.0, 1.0
    p = k / n
    denom = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    # the endpoints are exactly 0 and 1 at k = 0 and k = n
    lo = 0.0 if k == 0 else max(0.0, centre - half)
    hi = 1.0 if k == n else min(1.0, centre + half)
    return lo, hi


def success_by_turn(trajectories: Sequence[Trajectory], max_turns: int | None = None) -> list[CurvePoint]:
    """Point t is the fraction of episodes solved by turn t, with a Wilson 95% interval.

    ``ci95`` is the half-width of the interval.
    """
    trs = [t for t in trajectories if not t.aborted]
    if not trs:
        return []
    horizons = {t.max_turns for t in trs}
    if max_turns is None:
        if len(horizons) != 1:
            raise ValueError(f"trajectories disagree on the turn limit: {sorted(horizons)}")
        max_turns = horizons.pop()
    n = len(trs)
    counts = np.zeros(max_turns + 1, dtype=int)
    for t in trs:
        if t.success_turn is not None and t.success_turn <= max_turns:
            counts[t.success_turn] += 1
    cum = np.cumsum(counts)
    out = []
    for turn in range(1, max_turns + 1):
        k = int(cum[turn])
        lo, hi = wilson_interval(k, n)
        out.append(CurvePoint(turn, k / n, n, (hi - lo) / 2, lo, hi))
    return out


def loss_on_answer(policy, trajectory: Trajectory, answer_text: str, max_prefixes: int | None = None) -> list[float]:
    """-log p(answer | dialogue up to and including teacher turn j), for each teacher turn j."""
    if not getattr(policy, "scoring_capable", False):
        raise NotScoringCapable(f"{type(policy).__name__} cannot score text")
    out = []
    prefix: list[Message] = []
    for u in trajectory.dialogue.history:
        prefix.append(Message(u.role, u.text))
        if u.role == TEACHER:
            out.append(-policy.score(tuple(prefix), answer_text))
            if max_prefixes is not None and len(out) >= max_prefixes:
                break
    return out


def loss_on_answer_prefix(policy, prefix: Sequence[Message], answer_text: str) -> float:
    if not prefix or not any(role == TEACHER for role, _ in prefix):
        raise ValueError("the prefix must contain at least one teacher turn")
    return -policy.score(tuple(prefix), answer_text)


@dataclass(frozen=True)
class PairedTest:
    mean_difference: float
    statistic: float
    p_value: float
    n: int

    def significant(self, alpha: float = 0.05) -> bool:
        return self.p_value < alpha


def paired_test(a: Sequence[float], b: Sequence[float]) -> PairedTest:
    """Paired t-test of a - b. Identical samples (zero variance) give p = 1."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    d = a - b
    if d.size < 2:
        raise ValueError("need at least two pairs")
    if np.ptp(d) == 0:
        return PairedTest(float(d.mean()), 0.0 if d[0] == 0 else math.copysign(math.inf, d[0]),
                          1.0 if d[0] == 0 else 0.0, int(d.size))
    res = stats.ttest_rel(a, b)
    return PairedTest(float(d.mean()), float(res.statistic), float(res.pvalue), int(d.size))


# turn classification


@dataclass(frozen=True)
class TurnTypeLabel:
    trajectory_id: str
    turn: int
    label: str
    judge_id: str

    def to_dict(self) -> dict:
        return asdict(self)


class RuleJudge:
    """Offline judge: extractable answer, then trailing question mark, else discussion."""

    judge_id = "rules"

    def label(self, text: str, context: Sequence[Message] = ()) -> str:
        if not text or not text.strip():
            return OTHER
        if extract_guess(text) is not None or extract_answer(text) is not None:
            return ANSWER_ATTEMPT
        if text.rstrip().endswith("?"):
            return CLARIFICATION_QUESTION
        return DISCUSSION


def judge_prompt(text: str, context: Sequence[Message], labels: Sequence[str] = LABELS) -> list[dict]:
    transcript = "\n".join(f"{role.upper()}: {t}" for role, t in context)
    return [
        {
            "role": "system",
            "content": (
                "You label one student turn in a tutoring conversation. Reply with exactly one of: "
                + ", ".join(labels) + ". Reply with the label only."
            ),
        },
        {"role": "user", "content": f"Conversation so far:\n{transcript}\n\nStudent turn to label:\n{text}"},
    ]


class ChatJudge:
    """Forced-choice judge over a ``complete(messages) -> str`` callable; one retry, then ``other``."""

    def __init__(self, complete, judge_id: str = "chat", labels: Sequence[str] = LABELS):
        self.complete = complete
        self.judge_id = judge_id
        self.labels = tuple(labels)

    def _parse(self, reply: str) -> str | None:
        cleaned = reply.strip().strip(".").strip().lower()
        return cleaned if cleaned in self.labels else None

    def label(self, text: str, context: Sequence[Message] = ()) -> str:
        for attempt in range(2):
            try:
                got = self._parse(self.complete(judge_prompt(text, context, self.labels)))
            except PolicyFailure as exc:
                logger.warning("judge failure on attempt %d: %s", attempt + 1, exc)
                got = None
            if got is not None:
                return got
        return OTHER


def classify_turns(trajectories: Sequence[Trajectory], judge=None) -> list[TurnTypeLabel]:
    judge = judge or RuleJudge()
    labels = []
    for tr in trajectories:
        if tr.aborted:
            continue
        context: list[Message] = []
        for u in tr.dialogue.history:
            if u.role == STUDENT:
                labels.append(TurnTypeLabel(tr.trajectory_id, u.turn_index, judge.label(u.text, tuple(context)),
                                            judge.judge_id))
            context.append(Message(u.role, u.text))
    return labels


def frequency_by_turn(labels: Sequence[TurnTypeLabel], label_set: Sequence[str] = LABELS) -> dict[int, dict[str, float]]:
    """Turn position -> label -> share of conversations that reached that turn; rows sum to 1."""
    rows: dict[int, Counter] = defaultdict(Counter)
    for lab in labels:
        rows[lab.turn][lab.label] += 1
    out = {}
    for turn in sorted(rows):
        total = sum(rows[turn].values())
        out[turn] = {name: rows[turn][name] / total for name in label_set}
    return out


def rate_per_conversation(labels: Sequence[TurnTypeLabel], label: str = CLARIFICATION_QUESTION) -> dict[str, float]:
    """Fraction of each conversation's student turns that carry ``label``."""
    per: dict[str, list[int]] = defaultdict(list)
    for lab in labels:
        per[lab.trajectory_id].append(lab.label == label)
    return {tid: float(np.mean(v)) for tid, v in per.items()}


def write_curve_csv(points: Sequence[CurvePoint], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["turn", "cumulative_success_rate", "n", "ci95", "ci_low", "ci_high"])
        for p in points:
            w.writerow([p.turn, f"{p.cumulative_success_rate:.6f}", p.n, f"{p.ci95:.6f}", f"{p.ci_low:.6f}",
                        f"{p.ci_high:.6f}"])


def write_frequency_csv(table: dict[int, dict[str, float]], path, label_set: Sequence[str] = LABELS) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["turn", *label_set])
        for turn, row in table.items():
            w.writerow([turn, *(f"{row.get(name, 0.0):.6f}" for name in label_set)])


def write_labels(labels: Sequence[TurnTypeLabel], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for lab in labels:
            fh.write(json.dumps(lab.to_dict()) + "\n")


def write_loss_csv(losses: Sequence[Sequence[float]], path) -> None:
    """Mean and standard error of the loss at each teacher turn, over dialogues that reached it."""
    depth = max((len(x) for x in losses), default=0)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["teacher_turn", "mean_loss", "sem", "n"])
        for j in range(depth):
            vals = np.array([x[j] for x in losses if len(x) > j])
            sem = vals.std(ddof=1) / math.sqrt(vals.size) if vals.size > 1 else 0.0
            w.writerow([j + 1, f"{vals.mean():.6f}", f"{sem:.6f}", vals.size])
