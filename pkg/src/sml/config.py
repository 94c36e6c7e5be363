"""Run configuration: TOML file plus command-line overrides.

Unknown sections or keys and mistyped values are rejected with the file line
that holds them.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
import re
from pathlib import Path
from typing import Any

import tomli

from .errors import ConfigError

# section -> key -> (accepted types, default)
SCHEMA: dict[str, dict[str, tuple[tuple[type, ...], Any]]] = {
    "": {
        "seed": ((int,), 0),
        "out": ((str,), "runs/latest"),
        "workers": ((int,), 0),  # 0 = available cores
    },
    "tasks": {
        "path": ((str,), ""),
        "kind": ((str,), "toy"),  # used when path is empty
        "n": ((int,), 64),
        "M": ((int,), 64),
        "seed": ((int,), 0),
        "feedback_style": ((str,), "higher_lower"),
        "private_kind": ((str,), "verifier_log"),
    },
    "student": {
        "kind": ((str,), "toy_softmax"),  # toy_softmax | scripted | remote
        "strategy": ((str,), "bisect"),
        "checkpoint": ((str,), ""),
        "encoder": ((str,), "relative"),
        "M": ((int,), 64),
        "seed": ((int,), 0),
        "url": ((str,), ""),
        "model": ((str,), "default"),
        "timeout": ((int, float), 30.0),
        "max_concurrency": ((int,), 8),
        "temperature": ((int, float), 1.0),
        "scoring": ((bool,), False),
        "system_prompt": ((str,), ""),
    },
    "teacher": {
        "kind": ((str,), "scripted"),  # scripted | remote
        "style": ((str,), "corrective"),
        "seed": ((int,), 0),
        "url": ((str,), ""),
        "model": ((str,), "default"),
        "timeout": ((int, float), 30.0),
        "max_concurrency": ((int,), 8),
        "temperature": ((int, float), 0.7),
        "guard": ((bool,), True),
    },
    "reward": {
        "gamma": ((int, float), 0.7),
        "use_discounted": ((bool,), True),
    },
    "rollout": {
        "N": ((int,), 4),
        "samples_per_task": ((int,), 1),
        "temperature": ((int, float), 1.0),
    },
    "grpo": {
        "g": ((int,), 8),
        "beta": ((int, float), 0.0),
        "learning_rate": ((int, float), 4.0),
        "batch_groups": ((int,), 2),
        "N": ((int,), 4),
        "temperature": ((int, float), 1.0),
        "episodes": ((int,), 20000),
        "max_resample": ((int,), -1),  # -1 = g
        "checkpoint_every": ((int,), 250),
    },
    "sft": {
        "samples_per_task": ((int,), 1),
        "N": ((int,), 4),
        "dedup": ((bool,), True),
        "temperature": ((int, float), 1.0),
    },
    "qprime": {
        "input": ((str,), ""),  # trajectories file; generated when empty
        "samples_per_task": ((int,), 1),
        "N": ((int,), 4),
        "base": ((int, float), 0.75),
        "zero_based": ((bool,), False),
        "generator": ((str,), "template"),  # template | remote
        "url": ((str,), ""),
        "model": ((str,), "default"),
    },
    "eval": {
        "N": ((int,), 10),
        "episodes_per_task": ((int,), 1),
        "temperature": ((int, float), 0.0),
        "loss_on_answer": ((bool,), True),
        "classify": ((bool,), False),
        "input": ((str,), ""),  # trajectories file for classify
    },
    "judge": {
        "kind": ((str,), "rules"),  # rules | remote
        "url": ((str,), ""),
        "model": ((str,), "default"),
    },
}

# flag name -> (section, key)
OVERRIDES = {
    "seed": ("", "seed"),
    "out": ("", "out"),
    "workers": ("", "workers"),
    "tasks": ("tasks", "path"),
    "g": ("grpo", "g"),
    "beta": ("grpo", "beta"),
    "lr": ("grpo", "learning_rate"),
    "episodes": ("grpo", "episodes"),
    "gamma": ("reward", "gamma"),
    "eval_turns": ("eval", "N"),
}
# --max-turns sets N for the section the command uses
COMMAND_SECTION = {"rollout": "rollout", "train-grpo": "grpo", "build-sft": "sft", "qprime": "qprime", "eval": "eval"}


def defaults() -> dict[str, dict[str, Any]]:
    return {sec: {k: v[1] for k, v in keys.items()} for sec, keys in SCHEMA.items()}


def _locate(text: str, section: str, key: str | None = None) -> int | None:
    """1-based line of ``key`` inside ``[section]`` (or of the header when key is None)."""
    current = ""
    header = re.compile(r"^\s*\[\s*([A-Za-z0-9_.-]+)\s*\]\s*(#.*)?$")
    for i, line in enumerate(text.splitlines(), 1):
        m = header.match(line)
        if m:
            current = m.group(1)
            if key is None and current == section:
                return i
            continue
        if key is not None and current == section and re.match(rf"^\s*{re.escape(key)}\s*=", line):
            return i
    return None


def _where(path, text, section, key=None) -> str:
    line = _locate(text, section, key)
    return f"{path}:{line}" if line else str(path)


def _check_type(value, types) -> bool:
    if bool in types:
        return isinstance(value, bool)
    if isinstance(value, bool):
        return False
    return isinstance(value, types)


def load_config(path=None) -> dict[str, dict[str, Any]]:
    cfg = defaults()
    if path is None:
        return cfg
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    for name, value in raw.items():
        if isinstance(value, dict):
            if name not in SCHEMA or name == "":
                raise ConfigError(f"{_where(path, text, name)}: unknown section [{name}]")
            section, items = name, value
        else:
            section, items = "", {name: value}
        for key, v in items.items():
            spec = SCHEMA[section].get(key)
            label = f"{section}.{key}" if section else key
            if spec is None:
                raise ConfigError(f"{_where(path, text, section, key)}: unknown key {label!r}")
            if isinstance(v, dict):
                raise ConfigError(f"{_where(path, text, section, key)}: {label} must not be a table")
            if not _check_type(v, spec[0]):
                want = " or ".join(t.__name__ for t in spec[0])
                raise ConfigError(f"{_where(path, text, section, key)}: {label} must be {want}, got {v!r}")
            cfg[section][key] = float(v) if float in spec[0] and not isinstance(v, bool) else v
    return cfg


def apply_overrides(cfg, command: str, args) -> dict:
    cfg = copy.deepcopy(cfg)
    for flag, (section, key) in OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is not None:
            cfg[section][key] = value
    max_turns = getattr(args, "max_turns", None)
    if max_turns is not None and command in COMMAND_SECTION:
        cfg[COMMAND_SECTION[command]]["N"] = max_turns
    return cfg


def validate(cfg) -> None:
    checks = [
        (cfg["grpo"]["g"] >= 2, "grpo.g must be >= 2"),
        (cfg["grpo"]["beta"] >= 0, "grpo.beta must be >= 0"),
        (0 < cfg["reward"]["gamma"] <= 1, "reward.gamma must be in (0, 1]"),
        (cfg["student"]["kind"] in ("toy_softmax", "scripted", "remote"), "student.kind must be toy_softmax, scripted or remote"),
        (cfg["teacher"]["kind"] in ("scripted", "remote"), "teacher.kind must be scripted or remote"),
        (cfg["judge"]["kind"] in ("rules", "remote"), "judge.kind must be rules or remote"),
        (cfg["qprime"]["generator"] in ("template", "remote"), "qprime.generator must be template or remote"),
        (cfg["tasks"]["kind"] in ("toy", "expression"), "tasks.kind must be toy or expression"),
        (cfg[""]["workers"] >= 0, "workers must be >= 0"),
    ]
    for section in ("rollout", "grpo", "sft", "qprime", "eval"):
        checks.append((cfg[section]["N"] >= 1, f"{section}.N must be >= 1"))
    for ok, message in checks:
        if not ok:
            raise ConfigError(message)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def config_hash(cfg) -> str:
    return hashlib.sha256(canonical_json(cfg).encode("utf-8")).hexdigest()


def workers(cfg) -> int:
    return cfg[""]["workers"] or (os.cpu_count() or 1)
