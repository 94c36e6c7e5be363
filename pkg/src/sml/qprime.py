"""Question priming: replace failed student turns with information-seeking questions.

Each incorrect student turn t is replaced, with probability 0.75 ** t, by a
question written with access to the student's attempt and the teacher's
private knowledge. The teacher answers the question and the rest of the
dialogue is re-rolled from there. The injection draw for turn t of a
trajectory depends only on (seed, trajectory_id, t).
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, replace
from typing import Callable, Sequence

from .dialogue import EMPTY, DialogueState, PrivateKnowledge, Trajectory, initial_state, observe, step
from .errors import LeakedAnswer, PolicyFailure
from .offline import SftDataset, filter_trajectories, run_id_for
from .rewards import RewardConfig, discounted_reward
from .seeding import derived_rng
from .tasks.base import TaskInstance, ToyGuessTask
from .tasks.checking import CORRECT, check

logger = logging.getLogger(__name__)

TEMPLATE = "template"
PRIVILEGED_PROMPTED = "privileged_prompted"

TOY_QUESTION = "Is the target above or below my last guess?"
GENERIC_QUESTION = "Which part of my reasoning should I look at again?"


def injection_probability(t: int, turn_was_correct: bool, base: float = 0.75, zero_based: bool = False) -> float:
    if t < 1:
        raise ValueError("turns are 1-based")
    if turn_was_correct:
        return 0.0
    return base ** (t - 1 if zero_based else t)


@dataclass(frozen=True)
class InjectionEvent:
    trajectory_id: str
    turn: int
    p: float
    fired: bool
    question_text: str | None = None
    generator: str | None = None
    verdict: str | None = None
    error: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def validate_question(text: str, answer: str | None) -> str | None:
    """None if acceptable, else the reason it is not."""
    if not text or not text.strip():
        return "empty question"
    if not text.rstrip().endswith("?"):
        return "does not end with a question mark"
    if answer and answer.strip() and answer.strip().casefold() in text.casefold():
        return "contains the answer"
    return None


class TemplateQuestionGenerator:
    name = TEMPLATE

    def __call__(self, attempt: str, knowledge: PrivateKnowledge, task: TaskInstance | None = None) -> str:
        if task is not None and isinstance(task.checker, ToyGuessTask):
            return TOY_QUESTION
        return GENERIC_QUESTION


def question_prompt(attempt: str, knowledge: PrivateKnowledge) -> list[dict]:
    private = "\n".join(knowledge.strings()) or "(none)"
    return [
        {
            "role": "system",
            "content": (
                "You help a student who just gave a wrong answer. You can see privileged information the student "
                "cannot. Write exactly one short question the student could ask the teacher to get the information "
                "they are missing. Do not include the answer or any part of the privileged information verbatim. "
                "Reply with the question only."
            ),
        },
        {"role": "user", "content": f"Student attempt:\n{attempt}\n\nPrivileged information:\n{private}"},
    ]


class PromptedQuestionGenerator:
    """Question writer backed by any ``complete(messages) -> str`` callable, e.g. a remote chat client."""

    name = PRIVILEGED_PROMPTED

    def __init__(self, complete: Callable[[list[dict]], str]):
        self.complete = complete

    def __call__(self, attempt: str, knowledge: PrivateKnowledge, task: TaskInstance | None = None) -> str:
        return self.complete(question_prompt(attempt, knowledge)).strip()


def generate_privileged_question(
    attempt: str,
    knowledge: PrivateKnowledge,
    generator=None,
    answer: str | None = None,
    task: TaskInstance | None = None,
    fallback=None,
) -> tuple[str, str]:
    """(question, generator name). A leaking or malformed question is regenerated once, then the template is used."""
    if knowledge.kind == EMPTY:
        raise ValueError("question priming needs private knowledge")
    generator = generator or TemplateQuestionGenerator()
    fallback = fallback or TemplateQuestionGenerator()
    for _ in range(2):
        q = generator(attempt, knowledge, task)
        try:
            problem = validate_question(q, answer)
            if problem == "contains the answer":
                raise LeakedAnswer(f"generated question leaks the answer: {q!r}")
            if problem is None:
                return q, generator.name
            logger.info("rejected question %r: %s", q, problem)
        except LeakedAnswer as exc:
            logger.info("%s", exc)
    q = fallback(attempt, knowledge, task)
    if validate_question(q, answer) is not None:
        raise LeakedAnswer(f"fallback question is not acceptable: {q!r}")
    return q, fallback.name


def _mark_injected(state: DialogueState, index: int) -> DialogueState:
    history = list(state.history)
    u = history[index]
    history[index] = replace(u, meta={**u.meta, "injected": True})
    return replace(state, history=tuple(history))


def qprime_trajectory(
    trajectory: Trajectory,
    task: TaskInstance,
    student,
    teacher,
    generator=None,
    seed: int = 0,
    base: float = 0.75,
    zero_based: bool = False,
    reward_config: RewardConfig | None = None,
) -> tuple[Trajectory, list[InjectionEvent]]:
    """Replay one dialogue, injecting questions; after the first injection the student policy takes over."""
    reward_config = reward_config or RewardConfig()
    tid = trajectory.trajectory_id
    n = trajectory.max_turns
    original = trajectory.dialogue.history
    s_rng = derived_rng("qprime-student", seed, tid)
    t_rng = derived_rng("qprime-teacher", seed, tid)
    student = student.for_task(task) if student is not None else None
    answer = task.answer_text

    state = initial_state(task)
    diverged = False
    events = []
    while not state.terminated:
        t = state.turn
        pos = len(state.history)
        if not diverged:
            utterance = original[pos].text
            reply = original[pos + 1].text if pos + 1 < len(original) else None
        else:
            if student is None:
                raise ValueError("re-rolling after an injection needs a student policy")
            utterance = student.act(observe(state), rng=s_rng)
            reply = None
        verdict = check(task, utterance).verdict
        p = injection_probability(t, verdict == CORRECT, base, zero_based)
        fire = p > 0 and derived_rng("qprime", seed, tid, t).random() < p
        if not fire:
            events.append(InjectionEvent(tid, t, p, False, verdict=verdict))
            state = step(state, utterance, teacher, task, n, rng=t_rng, teacher_reply=reply)
            continue
        try:
            question, gen_name = generate_privileged_question(utterance, state.knowledge, generator, answer, task)
        except (PolicyFailure, LeakedAnswer) as exc:
            events.append(InjectionEvent(tid, t, p, False, verdict=verdict, error=str(exc)))
            state = step(state, utterance, teacher, task, n, rng=t_rng, teacher_reply=reply)
            continue
        events.append(InjectionEvent(tid, t, p, True, question, gen_name, verdict))
        state = step(state, question, teacher, task, n, rng=t_rng)
        state = _mark_injected(state, pos)
        diverged = True

    raw = 1 if state.success else 0
    out = Trajectory(
        dialogue=state,
        task_id=trajectory.task_id,
        raw_reward=raw,
        discounted_reward=discounted_reward(state.success_turn, reward_config.gamma) if raw else 0.0,
        success_turn=state.success_turn,
        seed=trajectory.seed,
        max_turns=n,
        policy_version=trajectory.policy_version,
    )
    return out, events


def build_qprimed_dataset(
    trajectories: Sequence[Trajectory],
    tasks,
    student,
    teacher,
    generator=None,
    seed: int = 0,
    base: float = 0.75,
    zero_based: bool = False,
    reward_config: RewardConfig | None = None,
    dedup: bool = True,
) -> tuple[SftDataset, list[InjectionEvent], list[Trajectory]]:
    """Dataset of the successful question-primed dialogues, the injection log and every primed dialogue.

    ``tasks`` is a sequence of task instances or a mapping from task_id.
    """
    by_id = tasks if isinstance(tasks, dict) else {t.task_id: t for t in tasks}
    primed, events = [], []
    skipped = 0
    for tr in trajectories:
        if tr.aborted:
            skipped += 1
            continue
        out, ev = qprime_trajectory(tr, by_id[tr.task_id], student, teacher, generator, seed, base, zero_based,
                                    reward_config)
        primed.append(out)
        events.extend(ev)
    run_id = run_id_for("qprime", seed, *[t.trajectory_id for t in trajectories])
    dataset = filter_trajectories(primed, run_id, dedup, reward_config)
    fired = sum(e.fired for e in events)
    dataset.provenance.update(
        {"seed": seed, "source_trajectories": len(trajectories), "source_aborted": skipped,
         "student_turns": len(events), "injections": fired}
    )
    return dataset, events, primed


def write_events(events: Sequence[InjectionEvent], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in events:
            fh.write(json.dumps(e.to_dict(), ensure_ascii=False) + "\n")


def read_events(path) -> list[InjectionEvent]:
    with open(path, encoding="utf-8") as fh:
        return [InjectionEvent(**json.loads(line)) for line in fh if line.strip()]


def events_path(path) -> str:
    return f"{path}.injections.jsonl"
