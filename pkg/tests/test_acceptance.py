"""Acceptance suite: one test and one verdict line per criterion."""

from __future__ import annotations

import json
import math
import statistics
import time

import numpy as np
import pytest

from acceptance_report import verdict
from conftest import all_secret_tasks
from sml.dialogue import (
    STUDENT,
    TEACHER,
    Trajectory,
    read_trajectories,
    run_episode,
    run_episodes,
    student_decisions,
    write_trajectories,
)
from sml.errors import GroupAbort
from sml.grpo import (
    GrpoConfig,
    RolloutGroup,
    advantages,
    export_rl_batch,
    gradient_from_decisions,
    rollout_group,
    surrogate_from_decisions,
)
from sml.offline import filter_trajectories, generate, mask_audit, read_dataset, recompute_raw_reward, write_dataset
from sml.policies import (
    AlwaysWrongStudent,
    FunctionPolicy,
    RandomConsistentStudent,
    SequenceReply,
    TaskConditionalStudent,
    ToySoftmaxPolicy,
    WaitForShardsStudent,
)
from sml.policies.remote import ChatClient, RemoteChatPolicy, RemoteTeacher
from sml.probes import loss_on_answer, paired_test, success_by_turn
from sml.qprime import PromptedQuestionGenerator, build_qprimed_dataset
from sml.records import read_records
from sml.rewards import RewardConfig, assign_reward
from sml.stub_server import StubServer
from sml.tasks import ExactAnswer, TaskInstance, ToyGuessTask, make_expression_tasks, make_toy_tasks, shard_wrap
from sml.tasks.base import toy_problem_text
from sml.tasks.teacher import ScriptedTeacher

import oracles

M = 64


# 1. advantages


def brute_advantages(r):
    mu = statistics.fmean(r)
    sd = statistics.pstdev(r)
    if sd == 0:
        return [0.0] * len(r)
    return [(x - mu) / sd for x in r]


def test_criterion_1_advantages():
    rng = np.random.default_rng(2024)
    vectors = []
    for i in range(1000):
        n = int(rng.integers(2, 33))
        if i % 10 == 0:
            r = np.full(n, float(rng.choice([0.0, 0.49, 1.0])))
        elif i % 2:
            r = rng.integers(0, 2**20, size=n) / 2**20  # grid rewards: shifts by integers stay exact
        else:
            r = rng.random(n)
        vectors.append(r)

    start = time.perf_counter()
    worst = 0.0
    zero_ok = invariants_ok = shift_ok = True
    for i, r in enumerate(vectors):
        a = advantages(r)
        worst = max(worst, float(np.max(np.abs(a - brute_advantages(list(r))))))
        if np.ptp(r) == 0:
            zero_ok &= bool(np.all(a == 0))
        else:
            invariants_ok &= abs(a.mean()) < 1e-9 and abs(a.std() - 1) < 1e-6
        if i % 2:
            c = float(rng.integers(-100, 101))
            shift_ok &= bool(np.array_equal(a, advantages(r + c)))
    elapsed = time.perf_counter() - start

    ok = worst < 1e-9 and zero_ok and invariants_ok and shift_ok and elapsed < 1.0
    verdict(1, ok, f"max |A - brute force| = {worst:.2e} (tol 1e-9), zero-variance all-zero {zero_ok}, "
                   f"mean/std invariants {invariants_ok}, exact shift invariance {shift_ok}, {elapsed:.3f} s (< 1 s)")


# 2. surrogate gradient


def test_criterion_2_gradient():
    rng = np.random.default_rng(77)
    teacher = ScriptedTeacher()
    eps = 1e-5
    start = time.perf_counter()
    worst = 0.0
    n_cfg = 0
    for i in range(50):
        encoder, m = ("relative", 64) if i % 5 < 3 else ("absolute", 4)
        beta = (0.0, 0.1)[i % 2]
        shape = ToySoftmaxPolicy(M=m, encoder=encoder).theta.shape
        policy = ToySoftmaxPolicy(M=m, encoder=encoder, theta=rng.normal(size=shape), seed=int(rng.integers(2**31)))
        reference = ToySoftmaxPolicy(M=m, encoder=encoder, theta=rng.normal(size=shape)).snapshot()
        task = TaskInstance("fd", toy_problem_text(m), ToyGuessTask(int(rng.integers(m)), m))
        tr = run_episode(task, policy, teacher, int(rng.integers(2, 7)), int(rng.integers(2**31)))
        steps = [(policy.features(obs), policy.action_index(text)) for obs, text in student_decisions(tr)]
        decisions = [(float(rng.normal()), steps)]

        analytic, _ = gradient_from_decisions(policy, decisions, beta, reference)
        numeric = np.zeros_like(policy.theta)
        for idx in np.ndindex(shape):
            up, dn = policy.theta.copy(), policy.theta.copy()
            up[idx] += eps
            dn[idx] -= eps
            numeric[idx] = (surrogate_from_decisions(policy, decisions, beta, reference, up)
                            - surrogate_from_decisions(policy, decisions, beta, reference, dn)) / (2 * eps)
        rel = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic), np.linalg.norm(numeric))
        worst = max(worst, float(rel))
        n_cfg += 1
    elapsed = time.perf_counter() - start
    verdict(2, worst < 1e-5 and elapsed < 10 and n_cfg == 50,
            f"{n_cfg} configurations (beta in {{0, 0.1}}, both encoders), max relative error {worst:.2e} "
            f"(tol 1e-5), {elapsed:.2f} s (< 10 s)")


# 3. desk-scale learning


def test_criterion_3_learning(trained_policy):
    teacher = ScriptedTeacher()
    held_out = all_secret_tasks(M, "eval")
    uniform = ToySoftmaxPolicy(M=M, seed=1)
    jobs = [(t, s) for s in range(40) for t in held_out]  # 2,560 sampled episodes
    untrained = success_by_turn(run_episodes(jobs, uniform, teacher, 6, temperature=1.0))[-1].cumulative_success_rate

    trained_trs = run_episodes([(t, 0) for t in held_out], trained_policy, teacher, 6, temperature=0.0)
    curve = [p.cumulative_success_rate for p in success_by_turn(trained_trs)]
    increasing = all(a < b for a, b in zip(curve, curve[1:]))
    episodes = trained_policy.train_result.episodes
    minutes = trained_policy.train_seconds / 60
    ok = untrained <= 0.15 and curve[-1] >= 0.90 and increasing and episodes <= 20_000 and minutes < 10
    verdict(3, ok, f"untrained sampled success by turn 6 {untrained:.3f} (<= 0.15; random-guess bound "
                   f"{oracles.RANDOM_GUESS_BOUND_6_OF_64:.4f}); after {episodes} GRPO episodes greedy success "
                   f"{curve[-1]:.3f} (>= 0.90), curve {[round(c, 3) for c in curve]} strictly increasing {increasing}; "
                   f"training {minutes:.2f} min")


# 4. offline pipeline


class _ExpressionLearner(TaskConditionalStudent):
    """Correct on even-seeded expression tasks after one wrong attempt, wrong otherwise."""

    def act(self, observation, temperature=None, rng=None):
        from sml.policies.scripted import correct_answer, wrong_answer

        task = self._task()
        tries = sum(1 for role, _ in observation if role == STUDENT)
        return correct_answer(task) if self.predicate(task) and tries >= 1 else wrong_answer(task)


def _offline_run(out_dir):
    teacher = ScriptedTeacher()
    toy = make_toy_tasks(300, seed=41, prefix="mix")
    exprs = make_expression_tasks(100, seed=42)
    trs = generate(toy, RandomConsistentStudent(seed=3, ask_probability=0.25), teacher, 2, 4, 11, workers=2)
    even = _ExpressionLearner(lambda t: int(t.task_id.rsplit("-", 1)[1]) % 2 == 0)
    trs += generate(exprs, even, teacher, 4, 4, 11)
    write_trajectories(trs, out_dir / "trajectories.jsonl")
    ds = filter_trajectories(trs, run_id="acceptance-4", dedup=False)
    write_dataset(ds, out_dir / "sft.jsonl")
    return {t.task_id: t for t in toy + exprs}


def test_criterion_4_offline(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir()
    b.mkdir()
    tasks = _offline_run(a)
    _offline_run(b)

    stored = read_trajectories(a / "trajectories.jsonl")
    dataset = read_dataset(a / "sft.jsonl")
    kept = {r.trajectory_id for r in dataset.records}
    mismatches = 0
    for tr in stored:
        recomputed = 0 if tr.aborted else recompute_raw_reward(tr, tasks[tr.task_id])
        mismatches += (recomputed == 1) != (tr.trajectory_id in kept)
        mismatches += recomputed != tr.raw_reward
    successes = sum(t.raw_reward for t in stored)
    audit = mask_audit(dataset, stored)
    audit_hash = mask_audit(dataset)
    files = ["trajectories.jsonl", "sft.jsonl", "sft.jsonl.provenance.json"]
    identical = all((a / f).read_bytes() == (b / f).read_bytes() for f in files)
    ok = len(stored) == 1000 and mismatches == 0 and audit.ok and audit_hash.ok and identical and 0 < successes < 1000
    verdict(4, ok, f"{len(stored)} episodes ({successes} successes), filter mismatches {mismatches}, "
                   f"mask_audit violations {len(audit.violations) + len(audit_hash.violations)}, "
                   f"byte-identical rerun {identical}")


# 5. question priming


def test_criterion_5_qprime():
    teacher = ScriptedTeacher()
    task = TaskInstance("qp", toy_problem_text(M), ToyGuessTask(37))
    wrong = AlwaysWrongStudent()
    trs = [run_episode(task, wrong, teacher, 3, s) for s in range(10_000)]
    _, events, _ = build_qprimed_dataset(trs, [task], wrong, teacher, seed=5)
    lines = []
    rates_ok = True
    for t, p in oracles.P_INJECT.items():
        incorrect = [e for e in events if e.turn == t and e.verdict != "correct"]
        n = len(incorrect)
        rate = sum(e.fired for e in incorrect) / n
        bound = 3 * math.sqrt(p * (1 - p) / n)
        rates_ok &= n >= 10_000 and abs(rate - p) <= bound
        lines.append(f"t={t}: {rate:.4f} vs {p:.4f} +- {bound:.4f} (n={n})")

    mixed_tasks = make_toy_tasks(2000, seed=8, prefix="qm")
    mixed = [run_episode(t, RandomConsistentStudent(seed=2), teacher, 6, i) for i, t in enumerate(mixed_tasks)]
    _, mixed_events, _ = build_qprimed_dataset(mixed, mixed_tasks, RandomConsistentStudent(seed=2), teacher, seed=5)
    correct_events = [e for e in mixed_events if e.verdict == "correct"]
    on_correct = sum(e.fired for e in correct_events)

    sentinels = [f"SNTL-{i:04d}-QX" for i in range(300)]
    sent_tasks = [TaskInstance(f"s{i}", "What is the word?", ExactAnswer(s)) for i, s in enumerate(sentinels)]
    leaky_replies = {}

    def leaky(messages):
        # plants the answer in every other request
        user = messages[-1]["content"]
        k = leaky_replies.setdefault(user, 0)
        leaky_replies[user] = k + 1
        secret = user.rsplit("\n", 1)[-1]
        return f"Is it {secret}?" if k % 2 == 0 else "What should I check first?"

    student = SequenceReply(["ANSWER: a", "ANSWER: b", "ANSWER: c"])
    sent_trs = [run_episode(t, student, teacher, 3, 0) for t in sent_tasks]
    ds, sent_events, primed = build_qprimed_dataset(sent_trs, sent_tasks, student, teacher,
                                                    PromptedQuestionGenerator(leaky), seed=1, base=1.0)
    leaks = 0
    for ev in sent_events:
        if ev.fired:
            leaks += any(s in ev.question_text for s in sentinels)
    for tr in primed:
        for u in tr.dialogue.history:
            if u.role == STUDENT and u.meta.get("injected"):
                leaks += any(s in u.text for s in sentinels)
    for rec in ds.records:
        leaks += sum(any(s in seg.text for s in sentinels) for seg in rec.segments if seg.role == STUDENT)
    fired = sum(e.fired for e in sent_events)

    ok = rates_ok and on_correct == 0 and len(correct_events) > 0 and leaks == 0 and fired > 0
    verdict(5, ok, "; ".join(lines) + f"; injections on {len(correct_events)} correct turns: {on_correct}; "
                   f"answer leaks in {fired} exported questions: {leaks}")


# 6. discounting


def test_criterion_6_discounting():
    teacher = ScriptedTeacher()
    task = TaskInstance("d", toy_problem_text(M), ToyGuessTask(37))
    got, raw_ok = [], True
    for turn in (1, 2, 3):
        student = SequenceReply(["GUESS 1"] * (turn - 1) + ["GUESS 37"])
        tr = run_episode(task, student, teacher, 4, 0, RewardConfig(0.7))
        got.append(assign_reward(tr, RewardConfig(0.7))[1])
        raw, disc = assign_reward(tr, RewardConfig(1.0))
        raw_ok &= disc == raw == 1 and tr.discounted_reward == got[-1]
    fail = run_episode(task, SequenceReply(["GUESS 1"]), teacher, 4, 0)
    raw_ok &= assign_reward(fail, RewardConfig(1.0)) == (0, 0.0)
    expected = [oracles.DISC_TURN_1, oracles.DISC_TURN_2, oracles.DISC_TURN_3]
    verdict(6, got == expected and raw_ok,
            f"turns 1/2/3 with gamma=0.7 -> {got} (exactly {expected}); gamma=1 reproduces raw rewards {raw_ok}")


# 7. loss on answer


def _paired_turn_losses(policy, tasks, teacher, want=500):
    first, third = [], []
    for i, task in enumerate(tasks):
        tr = run_episode(task, policy, teacher, 6, i, temperature=1.0)
        losses = loss_on_answer(policy, tr, f"GUESS {task.checker.secret}", max_prefixes=3)
        if len(losses) >= 3:
            first.append(losses[0])
            third.append(losses[2])
        if len(first) == want:
            break
    return np.array(first), np.array(third)


def test_criterion_7_loss_on_answer(trained_policy):
    teacher = ScriptedTeacher()
    rng = np.random.default_rng(123)
    tasks = [TaskInstance(f"h{i}", toy_problem_text(M), ToyGuessTask(int(s)))
             for i, s in enumerate(rng.integers(0, M, size=5000))]
    t1, t3 = _paired_turn_losses(trained_policy, tasks, teacher)
    trained_test = paired_test(t1, t3)
    u1, u3 = _paired_turn_losses(ToySoftmaxPolicy(M=M, seed=4), tasks, teacher)
    untrained_test = paired_test(u1, u3)
    ok = (len(t1) == 500 and len(u1) == 500 and t3.mean() < t1.mean() and not untrained_test.significant(0.05))
    verdict(7, ok, f"trained: mean loss teacher turn 1 {t1.mean():.3f} -> turn 3 {t3.mean():.3f} "
                   f"(p={trained_test.p_value:.2e}, n={len(t1)}); untrained: {u1.mean():.3f} -> {u3.mean():.3f} "
                   f"(paired p={untrained_test.p_value:.3f} >= 0.05, n={len(u1)})")


# 8. sharded protocol


class _Watcher:
    """Wraps a student and records what it was shown."""

    def __init__(self, inner):
        self.inner = inner
        self.seed = inner.seed
        self.seen = []

    def for_task(self, task):
        w = _Watcher(self.inner.for_task(task))
        w.seen = self.seen
        return w

    def act(self, observation, temperature=None, rng=None):
        self.seen.append(tuple(observation))
        return self.inner.act(observation, temperature, rng)


def test_criterion_8_sharded():
    teacher = ScriptedTeacher()
    rng = np.random.default_rng(8)
    order_ok = early_ok = termination_ok = True
    n_runs = 0
    for k in range(2, 8):
        for wait in range(0, k + 3):
            for kind in ("wait", "random"):
                shards = [f"<<S{k}-{j}-{int(rng.integers(1e6))}>>" for j in range(1, k + 1)]
                base = TaskInstance(f"sh{k}-{wait}", toy_problem_text(M), ToyGuessTask(int(rng.integers(M))))
                task = shard_wrap(base, shards)
                inner = WaitForShardsStudent(wait) if kind == "wait" else RandomConsistentStudent(seed=int(rng.integers(1e6)))
                student = _Watcher(inner)
                tr = run_episode(task, student, teacher, 20, int(rng.integers(1e6)))
                spoken = [u.text for u in tr.dialogue.history if u.role == TEACHER]
                order_ok &= spoken == shards[: len(spoken)]
                for obs in student.seen:
                    teacher_turns = sum(role == TEACHER for role, _ in obs)
                    blob = json.dumps(obs)
                    early_ok &= all(s not in blob for s in shards[teacher_turns:])
                n_student = tr.dialogue.student_turns
                if tr.dialogue.success:
                    termination_ok &= tr.dialogue.history[-1].meta["verdict"] == "correct" and n_student <= k
                else:
                    termination_ok &= n_student == k and len(spoken) == k
                n_runs += 1
    at_k = {}
    for k in (2, 3, 5):
        shards = [f"part {j} of the statement" for j in range(1, k + 1)]
        task = shard_wrap(TaskInstance(f"k{k}", "x", ToyGuessTask(9)), shards)
        at_k[k] = run_episode(task, WaitForShardsStudent(k), teacher, 4, 0).success_turn
    ok = order_ok and early_ok and termination_ok and at_k == {2: 2, 3: 3, 5: 5}
    verdict(8, ok, f"{n_runs} sharded dialogues: in-order {order_ok}, never early {early_ok}, "
                   f"termination on success or exhaustion {termination_ok}; wait-for-k success turns {at_k}")


# 9. observation hygiene


def _unspoken_hits(messages, private, teacher_role):
    """Private strings present in a student-visible message list but never said by the teacher."""
    spoken = " ".join(text for role, text in messages if role == teacher_role)
    blob = json.dumps([text for _, text in messages])
    return [s for s in private if s in blob and s not in spoken]


def _hygiene_tasks(rng, n):
    out = []
    for i in range(n):
        tag = f"PRIV{i:05d}X{int(rng.integers(1e9)):09d}"
        kind = i % 3
        if kind == 0:
            out.append(TaskInstance(f"gt{i}", "Name the hidden word.", ExactAnswer(tag)))
        elif kind == 1:
            shards = [f"{tag}-shard{j}" for j in range(int(rng.integers(2, 6)))]
            out.append(shard_wrap(TaskInstance(f"sq{i}", "x", ExactAnswer(f"{tag}-answer")), shards))
        else:
            tests = tuple((x, 1000003 + i * 7 + x) for x in range(1, 4))
            from sml.tasks import ExpressionTests

            out.append(TaskInstance(f"vl{i}", "Write the expression.", ExpressionTests(tests, reference=f"x + {1000003 + i * 7}"),
                                    "verifier_log"))
    return out


def _private_strings(task, tr):
    s = [task.answer_text] if task.private_kind == "ground_truth" else []
    if task.shards:
        s += list(task.shards) + [task.answer_text]
    s += tr.dialogue.knowledge.strings()
    return [x for x in s if x]


def test_criterion_9_hygiene():
    rng = np.random.default_rng(99)
    teacher = ScriptedTeacher()
    vocab = ["ANSWER: 3", "ANSWER: x + 1", "Could you give a hint?", "Let me think.", "ANSWER: maybe", "What?"]

    def babbler(obs):
        h = hash(json.dumps(obs)) % len(vocab)
        return vocab[h]

    tasks = _hygiene_tasks(rng, 10_000)
    hits = 0
    observations = 0
    for i, task in enumerate(tasks):
        watcher = _Watcher(FunctionPolicy(babbler, seed=i))
        tr = run_episode(task, watcher, teacher, int(rng.integers(1, 7)), i)
        private = _private_strings(task, tr)
        for obs in watcher.seen:
            observations += 1
            hits += len(_unspoken_hits(obs, private, TEACHER))

    body_hits = 0
    bodies = 0
    with StubServer() as srv:
        client = ChatClient(srv.url, timeout=5.0)
        remote = RemoteChatPolicy(client, seed=1)
        remote_tasks = _hygiene_tasks(rng, 200)
        results = [(task, run_episode(task, remote, teacher, 4, i)) for i, task in enumerate(remote_tasks)]
        secrets_by_text = {}
        for task, tr in results:
            for s in _private_strings(task, tr):
                secrets_by_text[s] = task
        all_private = list(secrets_by_text)
        for path, body in srv.requests:
            msgs = body["messages"]
            if msgs and msgs[0]["role"] == "system":
                continue
            bodies += 1
            pairs = [(m["role"], m["content"]) for m in msgs]
            body_hits += len(_unspoken_hits(pairs, all_private, "user"))
    ok = hits == 0 and body_hits == 0 and len(tasks) == 10_000 and bodies > 0
    verdict(9, ok, f"10,000 fuzzed episodes, {observations} student observations: {hits} unspoken private strings; "
                   f"{bodies} remote student request bodies: {body_hits}")


# 10. remote interoperability


def test_criterion_10_remote(tmp_path):
    teacher_faults = ["timeout", "malformed", "500"]
    student_faults = ["timeout", "malformed", "empty"]
    healthy = make_toy_tasks(24, seed=10, prefix="ok")
    faulty = [TaskInstance(f"bad-t-{f}", toy_problem_text(M) + f" [[FAULT:teacher-{f}]]", ToyGuessTask(40))
              for f in teacher_faults]
    faulty += [TaskInstance(f"bad-s-{f}", toy_problem_text(M) + f" [[FAULT:student-{f}]]", ToyGuessTask(40))
               for f in student_faults]
    with StubServer(fault_delay=1.0) as srv:
        client = ChatClient(srv.url, timeout=0.4)
        student, teacher = RemoteChatPolicy(client, seed=1), RemoteTeacher(client, seed=2)
        trs = generate(healthy + faulty, student, teacher, 1, 8, 0, workers=4)
        write_trajectories(trs, tmp_path / "remote.jsonl")
        ds = filter_trajectories(trs, run_id="remote")
        write_dataset(ds, tmp_path / "remote_sft.jsonl")

        cfg = GrpoConfig(g=4, N=8, max_resample=2)
        good_group = rollout_group(healthy[0], student, teacher, cfg)
        export_rl_batch([good_group], tmp_path / "rl.jsonl")
        dropped = 0
        for task in faulty[:2]:
            try:
                rollout_group(task, student, teacher, cfg)
            except GroupAbort:
                dropped += 1

    aborted = {t.trajectory_id for t in trs if t.aborted}
    fault_ids = {t.task_id for t in faulty}
    kept = read_dataset(tmp_path / "remote_sft.jsonl")
    in_dataset = {r.trajectory_id for r in kept.records}
    rl = read_records(tmp_path / "rl.jsonl")
    ok = (
        {t.task_id for t in trs if t.aborted} == fault_ids
        and not aborted & in_dataset
        and len(kept) == len(healthy)
        and mask_audit(kept, trs).ok
        and len(rl) == 4
        and not any(t.aborted for t in good_group.trajectories)
        and dropped == 2
    )
    verdict(10, ok, f"stub rollout of {len(trs)} episodes -> {len(kept)} kept records, {len(aborted)} aborted "
                    f"(faults: {', '.join(teacher_faults + student_faults)}), none in the dataset; "
                    f"RL batch of {len(rl)} records exported; {dropped}/2 faulty groups dropped")


def test_aborted_trajectories_cannot_form_groups():
    task = TaskInstance("x", toy_problem_text(M), ToyGuessTask(3))

    def dead(obs):
        from sml.errors import StudentFailure

        raise StudentFailure("down")

    bad = run_episode(task, FunctionPolicy(dead), ScriptedTeacher(), 4, 0)
    good = run_episode(task, AlwaysWrongStudent(), ScriptedTeacher(), 4, 1)
    with pytest.raises(ValueError):
        RolloutGroup("x", (bad, good), np.zeros(2), np.zeros(2))
