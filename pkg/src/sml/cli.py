"""Command-line entry point.

Every command writes ``config.json`` (the resolved configuration) and
``manifest.json`` (config hash, code version, seeds, input and output hashes)
into the output directory. Exit codes: 0 success, 1 runtime failure,
2 configuration or input error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod
from .dialogue import read_trajectories, run_episodes, write_trajectories
from .errors import ConfigError, EmptyDataset, MalformedChecker, SMLError
from .grpo import GrpoConfig, export_rl_batch, rollout_group, train
from .offline import generate, generate_and_filter, mask_audit, write_dataset
from .policies import ToySoftmaxPolicy
from .policies.remote import ChatClient, RemoteChatPolicy, RemoteTeacher
from .policies.scripted import SCRIPTED_STRATEGIES, correct_answer
from .probes import (
    ChatJudge,
    RuleJudge,
    classify_turns,
    frequency_by_turn,
    loss_on_answer,
    rate_per_conversation,
    success_by_turn,
    write_curve_csv,
    write_frequency_csv,
    write_labels,
    write_loss_csv,
)
from .qprime import PromptedQuestionGenerator, TemplateQuestionGenerator, build_qprimed_dataset, events_path, write_events
from .rewards import RewardConfig
from .seeding import derive_seed
from .tasks import load_tasks, make_expression_tasks, make_toy_tasks, save_tasks
from .tasks.teacher import ScriptedTeacher

logger = logging.getLogger("sml")

EXIT_OK, EXIT_RUNTIME, EXIT_INPUT = 0, 1, 2


class InputError(SMLError):
    """A named input file is missing or unreadable."""


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def code_version() -> str:
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.rglob("*.py")):
        h.update(p.relative_to(Path(__file__).parent).as_posix().encode())
        h.update(p.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


class Run:
    """Output directory bookkeeping for one command."""

    def __init__(self, command: str, cfg: dict):
        self.command = command
        self.cfg = cfg
        self.out = Path(cfg[""]["out"])
        self.out.mkdir(parents=True, exist_ok=True)
        self.inputs: dict[str, str] = {}
        self.outputs: list[Path] = []

    def input(self, path) -> Path:
        path = Path(path)
        if not path.is_file():
            raise InputError(f"input file not found: {path}")
        self.inputs[str(path)] = sha256_file(path)
        return path

    def path(self, name: str) -> Path:
        p = self.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.append(p)
        return p

    def finish(self) -> None:
        stable = {k: v for k, v in self.cfg.items()}
        stable[""] = {k: v for k, v in self.cfg[""].items() if k not in ("out", "workers")}
        (self.out / "config.json").write_text(cfgmod.canonical_json(self.cfg), encoding="utf-8")
        seeds = {"global": self.cfg[""]["seed"], "student": self.cfg["student"]["seed"],
                 "teacher": self.cfg["teacher"]["seed"], "tasks": self.cfg["tasks"]["seed"]}
        manifest = {
            "command": self.command,
            "config_sha256": cfgmod.config_hash(stable),
            "code_version": code_version(),
            "seeds": seeds,
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": {p.relative_to(self.out).as_posix(): sha256_file(p) for p in sorted(set(self.outputs)) if p.is_file()},
            "remote": self.cfg["student"]["kind"] == "remote" or self.cfg["teacher"]["kind"] == "remote",
        }
        (self.out / "manifest.json").write_text(cfgmod.canonical_json(manifest), encoding="utf-8")


# builders


def build_tasks(cfg, run: Run):
    t = cfg["tasks"]
    if t["path"]:
        return load_tasks(run.input(t["path"]))
    if t["kind"] == "toy":
        return make_toy_tasks(t["n"], t["M"], t["seed"], t["feedback_style"])
    return make_expression_tasks(t["n"], t["seed"], t["private_kind"])


def _client(section) -> ChatClient:
    return ChatClient(section["url"] or None, section["model"], timeout=section["timeout"],
                      max_concurrency=section["max_concurrency"])


def build_student(cfg, run: Run | None = None):
    s = cfg["student"]
    if s["kind"] == "toy_softmax":
        if s["checkpoint"]:
            path = run.input(s["checkpoint"]) if run else s["checkpoint"]
            return ToySoftmaxPolicy.load(path)
        return ToySoftmaxPolicy(s["M"], s["encoder"], s["seed"], default_temperature=s["temperature"])
    if s["kind"] == "scripted":
        cls = SCRIPTED_STRATEGIES.get(s["strategy"])
        if cls is None:
            raise ConfigError(f"student.strategy must be one of {sorted(SCRIPTED_STRATEGIES)}")
        if s["strategy"] in ("bisect", "random_consistent"):
            return cls(M=s["M"], seed=s["seed"])
        return cls(seed=s["seed"])
    return RemoteChatPolicy(_client(s), s["seed"], s["temperature"], s["system_prompt"] or None, s["scoring"])


def build_teacher(cfg):
    t = cfg["teacher"]
    if t["kind"] == "scripted":
        return ScriptedTeacher(t["style"], t["seed"])
    return RemoteTeacher(_client(t), t["seed"], t["temperature"], t["guard"])


def reward_config(cfg) -> RewardConfig:
    return RewardConfig(gamma=cfg["reward"]["gamma"], use_discounted=cfg["reward"]["use_discounted"])


def summarize(trajectories) -> dict:
    done = [t for t in trajectories if not t.aborted]
    wins = [t for t in done if t.raw_reward]
    return {
        "episodes": len(trajectories),
        "aborted": len(trajectories) - len(done),
        "success_rate": len(wins) / len(done) if done else 0.0,
        "mean_turns": float(np.mean([t.dialogue.student_turns for t in done])) if done else 0.0,
        "mean_success_turn": float(np.mean([t.success_turn for t in wins])) if wins else None,
        "mean_discounted_reward": float(np.mean([t.discounted_reward for t in done])) if done else 0.0,
    }


def write_json(path, obj) -> None:
    Path(path).write_text(cfgmod.canonical_json(obj), encoding="utf-8")


# commands


def cmd_rollout(cfg, run: Run) -> int:
    tasks = build_tasks(cfg, run)
    r = cfg["rollout"]
    trajectories = generate(tasks, build_student(cfg, run), build_teacher(cfg), r["samples_per_task"], r["N"],
                            cfg[""]["seed"], reward_config(cfg), cfgmod.workers(cfg), r["temperature"])
    write_trajectories(trajectories, run.path("trajectories.jsonl"))
    summary = summarize(trajectories)
    write_json(run.path("summary.json"), summary)
    print(f"{summary['episodes']} episodes, success {summary['success_rate']:.3f}, "
          f"mean turns {summary['mean_turns']:.2f}, aborted {summary['aborted']}")
    return EXIT_OK


def _greedy_curve(policy, tasks, teacher, N, rc):
    trs = run_episodes([(t, 0) for t in tasks], policy, teacher, N, rc, temperature=0.0)
    return [p.cumulative_success_rate for p in success_by_turn(trs)]


def cmd_train_grpo(cfg, run: Run) -> int:
    student = build_student(cfg, run)
    if not isinstance(student, ToySoftmaxPolicy):
        raise ConfigError("train-grpo trains the toy_softmax student; export RL batches for other students")
    tasks = build_tasks(cfg, run)
    teacher = build_teacher(cfg)
    g = cfg["grpo"]
    gc = GrpoConfig(g=g["g"], beta=g["beta"], learning_rate=g["learning_rate"], batch_groups=g["batch_groups"], N=g["N"],
                    temperature=g["temperature"], seed=cfg[""]["seed"],
                    max_resample=None if g["max_resample"] < 0 else g["max_resample"], reward=reward_config(cfg))
    rows = []

    def on_step(rep):
        rows.append(rep.to_dict())
        if g["checkpoint_every"] and rep.step % g["checkpoint_every"] == 0:
            student.save(run.path(f"checkpoints/step_{rep.step:06d}.json"))

    result = train(student, tasks, teacher, gc, g["episodes"], workers=cfgmod.workers(cfg), on_step=on_step,
                   dump_path=run.out / "nonfinite_dump.npz")
    with open(run.path("metrics.csv"), "w", newline="", encoding="utf-8") as fh:
        fields = list(rows[0]) if rows else ["step"]
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
    student.save(run.path("policy.json"))
    # one fresh batch from the trained policy, in the trainer export format
    groups = [rollout_group(t, student, teacher, gc, group_index=-1 - i) for i, t in enumerate(tasks[: g["batch_groups"]])]
    export_rl_batch(groups, run.path("rl_batch.jsonl"))
    curve = _greedy_curve(student, tasks, teacher, g["N"], gc.reward)
    write_json(run.path("summary.json"), {"steps": len(result.reports), "episodes": result.episodes,
                                           "dropped_groups": result.dropped, "greedy_success_by_turn": curve})
    print(f"{len(result.reports)} steps, {result.episodes} episodes; greedy success by turn {g['N']}: {curve[-1]:.3f}")
    return EXIT_OK


def cmd_build_sft(cfg, run: Run) -> int:
    tasks = build_tasks(cfg, run)
    s = cfg["sft"]
    out = run.path("sft.jsonl")
    run.outputs.append(Path(f"{out}.provenance.json"))
    try:
        dataset, trajectories = generate_and_filter(
            tasks, build_student(cfg, run), build_teacher(cfg), s["samples_per_task"], s["N"], cfg[""]["seed"],
            reward_config(cfg), s["dedup"], cfgmod.workers(cfg), s["temperature"], return_trajectories=True)
    except EmptyDataset as exc:
        write_dataset(exc.dataset, out)
        print(f"empty dataset: {exc}")
        return EXIT_OK
    write_trajectories(trajectories, run.path("trajectories.jsonl"))
    write_dataset(dataset, out)
    audit = mask_audit(dataset, trajectories)
    p = dataset.provenance
    print(f"kept {p['kept']} of {p['generated']} ({p['kept_rate']:.3f}); mask violations {len(audit.violations)}")
    return EXIT_OK if audit.ok else EXIT_RUNTIME


def cmd_qprime(cfg, run: Run) -> int:
    tasks = build_tasks(cfg, run)
    q = cfg["qprime"]
    student, teacher = build_student(cfg, run), build_teacher(cfg)
    if q["input"]:
        trajectories = read_trajectories(run.input(q["input"]))
    else:
        trajectories = generate(tasks, student, teacher, q["samples_per_task"], q["N"], cfg[""]["seed"],
                                reward_config(cfg), cfgmod.workers(cfg))
    if q["generator"] == "remote":
        client = ChatClient(q["url"] or None, q["model"])
        generator = PromptedQuestionGenerator(lambda msgs: client.complete(msgs, 1.0))
    else:
        generator = TemplateQuestionGenerator()
    dataset, events, primed = build_qprimed_dataset(trajectories, tasks, student, teacher, generator, cfg[""]["seed"],
                                                    q["base"], q["zero_based"], reward_config(cfg))
    out = run.path("qprimed.jsonl")
    write_dataset(dataset, out)
    run.outputs.append(Path(f"{out}.provenance.json"))
    write_events(events, run.path(Path(events_path(out)).name))
    write_trajectories(primed, run.path("qprimed_trajectories.jsonl"))
    fired = sum(e.fired for e in events)
    print(f"{fired} injections over {len(events)} student turns; kept {len(dataset)} dialogues")
    return EXIT_OK


def build_judge(cfg):
    j = cfg["judge"]
    if j["kind"] == "rules":
        return RuleJudge()
    client = ChatClient(j["url"] or None, j["model"])
    return ChatJudge(lambda msgs: client.complete(msgs, 0.0), judge_id=f"remote:{j['model']}")


def _classify_outputs(trajectories, judge, run: Run) -> None:
    labels = classify_turns(trajectories, judge)
    write_labels(labels, run.path("turn_labels.jsonl"))
    write_frequency_csv(frequency_by_turn(labels), run.path("turn_types.csv"))
    rates = rate_per_conversation(labels)
    with open(run.path("question_rate.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["trajectory_id", "clarification_rate"])
        for tid, rate in rates.items():
            w.writerow([tid, f"{rate:.6f}"])


def cmd_eval(cfg, run: Run) -> int:
    tasks = build_tasks(cfg, run)
    e = cfg["eval"]
    student, teacher = build_student(cfg, run), build_teacher(cfg)
    jobs = [(t, derive_seed("eval", cfg[""]["seed"], t.task_id, k)) for t in tasks for k in range(e["episodes_per_task"])]
    trajectories = run_episodes(jobs, student, teacher, e["N"], reward_config(cfg), e["temperature"], cfgmod.workers(cfg))
    write_trajectories(trajectories, run.path("eval_trajectories.jsonl"))
    curve = success_by_turn(trajectories, e["N"])
    write_curve_csv(curve, run.path("success_by_turn.csv"))
    by_id = {t.task_id: t for t in tasks}
    if e["loss_on_answer"] and getattr(student, "scoring_capable", False):
        losses = [loss_on_answer(student, tr, correct_answer(by_id[tr.task_id])) for tr in trajectories if not tr.aborted]
        write_loss_csv(losses, run.path("loss_on_answer.csv"))
    if e["classify"]:
        _classify_outputs(trajectories, build_judge(cfg), run)
    final = curve[-1].cumulative_success_rate if curve else 0.0
    print(f"success by turn {e['N']}: {final:.3f} over {len(trajectories)} episodes")
    return EXIT_OK


def cmd_classify(cfg, run: Run) -> int:
    src = cfg["eval"]["input"]
    if not src:
        raise ConfigError("classify needs a trajectories file (--input or eval.input)")
    trajectories = read_trajectories(run.input(src))
    _classify_outputs(trajectories, build_judge(cfg), run)
    print(f"labelled {sum(t.dialogue.student_turns for t in trajectories if not t.aborted)} student turns")
    return EXIT_OK


def cmd_make_tasks(cfg, run: Run) -> int:
    t = cfg["tasks"]
    tasks = build_tasks({**cfg, "tasks": {**t, "path": ""}}, run)
    save_tasks(tasks, run.path("tasks.jsonl"))
    print(f"wrote {len(tasks)} tasks")
    return EXIT_OK


COMMANDS = {
    "rollout": cmd_rollout,
    "train-grpo": cmd_train_grpo,
    "build-sft": cmd_build_sft,
    "qprime": cmd_qprime,
    "eval": cmd_eval,
    "classify": cmd_classify,
    "make-tasks": cmd_make_tasks,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sml", description="Teacher-student dialogue RL engine.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", "-c", help="TOML config file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int)
        p.add_argument("--tasks", help="task JSONL file")
        p.add_argument("--g", type=int, help="GRPO group size")
        p.add_argument("--beta", type=float, help="KL coefficient")
        p.add_argument("--gamma", type=float, help="turn discount")
        p.add_argument("--lr", type=float, help="learning rate")
        p.add_argument("--episodes", type=int, help="GRPO episode budget")
        p.add_argument("--max-turns", type=int, help="turn limit N for this command")
        p.add_argument("--eval-turns", type=int, help="turn limit for eval")
        if name == "classify":
            p.add_argument("--input", help="trajectories JSONL to label")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = cfgmod.apply_overrides(cfgmod.load_config(args.config), args.command, args)
        if getattr(args, "input", None):
            cfg["eval"]["input"] = args.input
        cfgmod.validate(cfg)
        run = Run(args.command, cfg)
        code = COMMANDS[args.command](cfg, run)
        run.finish()
        return code
    except (ConfigError, InputError, MalformedChecker) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 1
        logger.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
