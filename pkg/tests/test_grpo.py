from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sml.dialogue import run_episode
from sml.errors import GroupAbort, GroupTooSmall, NonFiniteGradient, StudentFailure
from sml.grpo import (
    GrpoConfig,
    RolloutGroup,
    advantages,
    export_rl_batch,
    gradient_from_decisions,
    policy_gradient_step,
    rollout_group,
    surrogate,
    surrogate_gradient,
    train,
)
from sml.policies import FunctionPolicy, OracleStudent, ToySoftmaxPolicy
from sml.records import read_records
from sml.tasks import TaskInstance, ToyGuessTask, make_toy_tasks
from sml.tasks.base import toy_problem_text
from sml.tasks.teacher import ScriptedTeacher

import oracles


def test_advantage_examples():
    a = advantages([1, 0, 0, 0, 0, 0, 0, 1])
    np.testing.assert_allclose(a[[0, 7]], oracles.ADV_TWO_OF_EIGHT_POS, rtol=1e-15)
    np.testing.assert_allclose(a[1:7], oracles.ADV_TWO_OF_EIGHT_NEG, rtol=1e-15)
    np.testing.assert_array_equal(advantages([1, 0]), [1, -1])
    np.testing.assert_array_equal(advantages([1, 1, 0, 0]), [1, 1, -1, -1])
    np.testing.assert_array_equal(advantages([0.49, 0.49, 0.49]), [0, 0, 0])
    with pytest.raises(GroupTooSmall):
        advantages([1.0])


@given(st.lists(st.integers(0, 2**20), min_size=2, max_size=32), st.integers(-1000, 1000))
def test_shift_invariance_exact(ticks, shift):
    r = np.array(ticks, dtype=float) / 2**20
    np.testing.assert_array_equal(advantages(r), advantages(r + shift))


@given(st.lists(st.floats(-10, 10), min_size=2, max_size=32))
def test_normalization_invariants(r):
    a = advantages(r)
    if np.ptp(r) == 0:
        assert np.all(a == 0)
    elif np.std(r) > 1e-6:
        assert abs(a.mean()) < 1e-9 and abs(a.std() - 1) < 1e-6


def toy(secret, tid=None, M=64):
    return TaskInstance(tid or f"toy-{secret}", toy_problem_text(M), ToyGuessTask(secret, M))


def test_oracle_group_is_all_zero(teacher):
    grp = rollout_group(toy(5), OracleStudent(), teacher, GrpoConfig(g=8))
    assert grp.g == 8 and np.all(grp.rewards == 1) and np.all(grp.advantages == 0)
    assert len({t.seed for t in grp.trajectories}) == 8


def test_group_resamples_then_aborts(teacher):
    calls = {"n": 0}

    def flaky(obs):
        calls["n"] += 1
        if calls["n"] % 3 == 0:
            raise StudentFailure("flake")
        return "GUESS 5"

    grp = rollout_group(toy(5), FunctionPolicy(flaky), teacher, GrpoConfig(g=8))
    assert grp.g == 8 and grp.resampled > 0 and not any(t.aborted for t in grp.trajectories)

    def dead(obs):
        raise StudentFailure("down")

    with pytest.raises(GroupAbort) as err:
        rollout_group(toy(5), FunctionPolicy(dead), teacher, GrpoConfig(g=4, max_resample=2))
    assert err.value.task_id == "toy-5"


def random_groups(policy, rng, n_groups=1, g=3, N=3):
    groups = []
    teacher = ScriptedTeacher()
    for k in range(n_groups):
        task = toy(int(rng.integers(policy.M)), f"g{k}", policy.M)
        trs = tuple(run_episode(task, policy, teacher, N, int(rng.integers(2**31))) for _ in range(g))
        r = rng.random(g)
        groups.append(RolloutGroup(task.task_id, trs, r, advantages(r)))
    return groups


def fd_gradient(policy, groups, beta, reference, eps=1e-5):
    theta = policy.theta
    grad = np.zeros_like(theta)
    for idx in np.ndindex(theta.shape):
        up, dn = theta.copy(), theta.copy()
        up[idx] += eps
        dn[idx] -= eps
        grad[idx] = (surrogate(policy, groups, beta, reference, up) - surrogate(policy, groups, beta, reference, dn)) / (2 * eps)
    return grad


def relative_error(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


@pytest.mark.parametrize("encoder", ["relative", "absolute"])
@pytest.mark.parametrize("beta", [0.0, 0.1])
def test_gradient_matches_finite_differences(encoder, beta):
    rng = np.random.default_rng(7)
    shape = ToySoftmaxPolicy(M=2, encoder=encoder).theta.shape
    for _ in range(3):
        policy = ToySoftmaxPolicy(M=2, encoder=encoder, theta=rng.normal(size=shape), seed=int(rng.integers(100)))
        reference = ToySoftmaxPolicy(M=2, encoder=encoder, theta=rng.normal(size=shape)).snapshot()
        groups = random_groups(policy, rng, n_groups=2)
        analytic = surrogate_gradient(policy, groups, beta, reference)
        if np.linalg.norm(analytic) < 1e-6:
            continue  # identical rollouts: the gradient is exactly zero and relative error is undefined
        assert relative_error(analytic, fd_gradient(policy, groups, beta, reference)) < 1e-5


def test_zero_advantage_no_kl_leaves_theta(teacher):
    policy = ToySoftmaxPolicy(M=64)
    grp = rollout_group(toy(5), OracleStudent(), teacher, GrpoConfig(g=4))
    before = policy.theta.copy()
    # the oracle's GUESS 5 is a legal toy action, so the group is scoreable
    rep = policy_gradient_step(policy, [grp], GrpoConfig(g=4))
    np.testing.assert_array_equal(policy.theta, before)
    assert rep.grad_norm == 0.0 and rep.mean_abs_advantage == 0.0


def test_positive_advantage_raises_chosen_logit():
    theta = np.random.default_rng(1).normal(size=ToySoftmaxPolicy(M=8, encoder="absolute").theta.shape)
    policy = ToySoftmaxPolicy(M=8, encoder="absolute", theta=theta)
    obs = ((("teacher", toy_problem_text(8))),)
    feats = policy.features(obs)
    before = policy.logits(feats=feats)
    grad, _ = gradient_from_decisions(policy, [(1.0, [(feats, 3)])], 0.0)
    policy.update(0.5 * grad)
    delta = policy.logits(feats=feats) - before
    assert delta[3] > 0 and np.all(np.delete(delta, 3) < 0)


def test_non_finite_gradient_dumps(tmp_path, teacher):
    policy = ToySoftmaxPolicy(M=64)
    grp = rollout_group(toy(5), policy, teacher, GrpoConfig(g=4, N=2))
    object.__setattr__(grp, "advantages", np.full(4, np.nan))
    dump = tmp_path / "dump.npz"
    with pytest.raises(NonFiniteGradient):
        policy_gradient_step(policy, [grp], GrpoConfig(g=4), dump_path=dump)
    assert dump.exists()


def test_export_rl_batch(tmp_path, teacher):
    policy = ToySoftmaxPolicy(M=64, seed=2)
    grp = rollout_group(toy(40), policy, teacher, GrpoConfig(g=8, N=4))
    recs = export_rl_batch([grp], tmp_path / "batch.jsonl")
    assert len(recs) == 8
    assert [r.advantage for r in recs] == list(grp.advantages)
    for rec, tr in zip(recs, grp.trajectories):
        n_student = sum(u.role == "student" for u in tr.dialogue.history)
        assert sum(s.train for s in rec.segments) == n_student
        assert all(s.train == (s.role == "student") for s in rec.segments)
    assert read_records(tmp_path / "batch.jsonl") == recs


def test_train_is_deterministic():
    tasks = make_toy_tasks(50, seed=4)
    cfg = GrpoConfig(g=4, batch_groups=2, N=6, seed=3)
    a, b = ToySoftmaxPolicy(M=64), ToySoftmaxPolicy(M=64)
    ra = train(a, tasks, ScriptedTeacher(), cfg, episodes=200)
    train(b, tasks, ScriptedTeacher(), cfg, episodes=200, workers=3)
    np.testing.assert_array_equal(a.theta, b.theta)
    assert ra.episodes >= 200 and ra.reports[0].kl == 0.0 and a.version == len(ra.reports)


def test_kl_penalty_keeps_policy_closer():
    tasks = make_toy_tasks(100, seed=5)
    kls = {}
    for beta in (0.0, 1.0):
        pol = ToySoftmaxPolicy(M=64)
        res = train(pol, tasks, ScriptedTeacher(), GrpoConfig(g=8, beta=beta, N=6, seed=1), episodes=3000)
        kls[beta] = np.array([r.kl for r in res.reports])
    steps = min(len(kls[0.0]), len(kls[1.0]))
    late = slice(steps // 2, steps)
    assert kls[1.0][late].mean() < kls[0.0][late].mean()


def test_trained_policy_respects_feedback(trained_policy):
    from sml.tasks.toy import read_toy

    tasks = make_toy_tasks(200, seed=99, prefix="fc")
    consistent = total = 0
    for i, task in enumerate(tasks):
        tr = run_episode(task, trained_policy, ScriptedTeacher(), 6, i, temperature=0)
        hist = [(u.role, u.text) for u in tr.dialogue.history]
        for j, (role, text) in enumerate(hist):
            if role == "student" and text.startswith("GUESS"):
                view = read_toy(hist[:j], 64)
                total += 1
                consistent += view.lo <= int(text.split()[1]) <= view.hi
    assert consistent / total >= 0.95


def test_training_budget_respected(trained_policy):
    evals = trained_policy.train_result
    assert evals.episodes >= 20_000 - 16 and evals.episodes <= 20_000 + 16
    assert not evals.dropped
