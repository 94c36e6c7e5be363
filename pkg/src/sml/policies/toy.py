"""Learnable log-linear student for the guessing game.

Actions are ``GUESS v`` for v in [0, M) plus one ASK action. Logits are linear
in theta given features of the observation, so log-probabilities, KL terms and
their gradients are all closed form.

Two encoders are provided:

* ``relative`` (default): state-action features, logits = X(o) @ theta with X
  of shape (A, F). Each guess is described relative to the feasible interval
  (outside below / outside above / at the midpoint / scaled distance to the
  midpoint), per log2 width class; ASK gets a turn one-hot.
* ``absolute``: state features only, logits = phi(o) @ Theta with Theta of
  shape (D, A); phi is a bias, one-hot lo, one-hot hi, turn, last feedback
  token and width class.
"""

from __future__ import annotations

import json
import re
from functools import lru_cache

import numpy as np

from ..tasks.toy import ASK_TEXT, N_FEEDBACK, read_toy
from .base import REFERENCE_SNAPSHOT, TOY_SOFTMAX, Policy

_ACTION = re.compile(r"GUESS\s+(-?\d+)|" + re.escape(ASK_TEXT), re.IGNORECASE)
STUDENT = "student"


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max()
    return z - np.log(np.exp(z).sum())


def n_width_classes(M: int) -> int:
    return int(np.floor(np.log2(M))) + 1


def width_class(width: int, n_classes: int) -> int:
    return min(int(np.floor(np.log2(width))), n_classes - 1)


class RelativeEncoder:
    name = "relative"
    per_class = 5

    def __init__(self, M: int, tmax: int = 12):
        self.M = M
        self.tmax = tmax
        self.n_classes = n_width_classes(M)
        self.dim = self.n_classes * self.per_class + tmax
        self.theta_shape = (self.dim,)
        self._cached = lru_cache(maxsize=8192)(self._features)

    def encode(self, observation) -> np.ndarray:
        view = read_toy(observation, self.M)
        return self._cached(view.lo, view.hi, min(view.turn, self.tmax))

    def _features(self, lo: int, hi: int, turn: int) -> np.ndarray:
        M = self.M
        x = np.zeros((M + 1, self.dim))
        w = hi - lo + 1
        base = width_class(w, self.n_classes) * self.per_class
        v = np.arange(M)
        inside = (v >= lo) & (v <= hi)
        x[:M, base] = v < lo
        x[:M, base + 1] = v > hi
        x[(lo + hi) // 2, base + 2] = 1.0
        r = 2.0 * np.abs(v - (lo + hi) / 2.0) / w
        x[:M, base + 3] = np.where(inside, -r, 0.0)
        x[:M, base + 4] = np.where(inside, -r * r, 0.0)
        x[M, self.n_classes * self.per_class + turn - 1] = 1.0
        x.flags.writeable = False
        return x

    @staticmethod
    def logits(theta, x):
        return x @ theta

    @staticmethod
    def vjp(x, g):
        """Gradient w.r.t. theta of g . logits."""
        return x.T @ g


class AbsoluteEncoder:
    name = "absolute"

    def __init__(self, M: int, tmax: int = 12):
        self.M = M
        self.tmax = tmax
        self.n_classes = n_width_classes(M)
        self._off_lo = 1
        self._off_hi = 1 + M
        self._off_turn = 1 + 2 * M
        self._off_fb = self._off_turn + tmax
        self._off_wc = self._off_fb + N_FEEDBACK
        self.dim = self._off_wc + self.n_classes
        self.theta_shape = (self.dim, M + 1)

    def encode(self, observation) -> np.ndarray:
        view = read_toy(observation, self.M)
        phi = np.zeros(self.dim)
        phi[0] = 1.0
        phi[self._off_lo + view.lo] = 1.0
        phi[self._off_hi + view.hi] = 1.0
        phi[self._off_turn + min(view.turn, self.tmax) - 1] = 1.0
        phi[self._off_fb + view.last_feedback] = 1.0
        phi[self._off_wc + width_class(view.width, self.n_classes)] = 1.0
        return phi

    @staticmethod
    def logits(theta, phi):
        return phi @ theta

    @staticmethod
    def vjp(phi, g):
        return np.outer(phi, g)


ENCODERS = {"relative": RelativeEncoder, "absolute": AbsoluteEncoder}


class ToySoftmaxPolicy(Policy):
    kind = TOY_SOFTMAX
    scoring_capable = True

    def __init__(
        self,
        M: int = 64,
        encoder: str = "relative",
        seed: int = 0,
        theta: np.ndarray | None = None,
        tmax: int = 12,
        default_temperature: float = 1.0,
        version: int = 0,
    ):
        if encoder not in ENCODERS:
            raise ValueError(f"unknown encoder {encoder!r}")
        self.M = M
        self.n_actions = M + 1
        self.encoder_name = encoder
        self.encoder = ENCODERS[encoder](M, tmax)
        self.tmax = tmax
        self.seed = seed
        self.default_temperature = default_temperature
        self.version = version
        if theta is None:
            theta = np.zeros(self.encoder.theta_shape)
        theta = np.array(theta, dtype=float)
        if theta.shape != self.encoder.theta_shape:
            raise ValueError(f"theta has shape {theta.shape}, expected {self.encoder.theta_shape}")
        self._theta = theta

    # parameters

    @property
    def theta(self) -> np.ndarray:
        return self._theta

    def set_theta(self, theta: np.ndarray) -> None:
        theta = np.array(theta, dtype=float)
        if theta.shape != self.encoder.theta_shape:
            raise ValueError(f"theta has shape {theta.shape}, expected {self.encoder.theta_shape}")
        self._theta = theta
        self.version += 1

    def update(self, delta: np.ndarray) -> None:
        self.set_theta(self._theta + delta)

    # actions

    def action_text(self, a: int) -> str:
        return ASK_TEXT if a == self.M else f"GUESS {a}"

    def action_index(self, text: str) -> int | None:
        found = _ACTION.fullmatch(text.strip())
        if not found:
            return None
        if found.group(1) is None:
            return self.M
        v = int(found.group(1))
        return v if 0 <= v < self.M else None

    def features(self, observation):
        return self.encoder.encode(observation)

    def logits(self, observation=None, feats=None, theta=None) -> np.ndarray:
        feats = self.features(observation) if feats is None else feats
        return self.encoder.logits(self._theta if theta is None else theta, feats)

    def probs(self, observation, temperature: float = 1.0) -> np.ndarray:
        z = self.logits(observation)
        return softmax(z / temperature) if temperature > 0 else np.eye(self.n_actions)[int(np.argmax(z))]

    def act(self, observation, temperature=None, rng=None) -> str:
        temperature = self.default_temperature if temperature is None else temperature
        z = self.logits(observation)
        if temperature == 0:
            return self.action_text(int(np.argmax(z)))
        rng = rng if rng is not None else np.random.default_rng(self.seed)
        p = softmax(z / temperature)
        return self.action_text(int(rng.choice(self.n_actions, p=p)))

    # scoring

    def log_prob(self, observation, a: int) -> float:
        return float(log_softmax(self.logits(observation))[a])

    def score(self, observation, target_text: str) -> float:
        """log p(target | observation); a multi-action target is scored by the chain rule.

        Each action after the first is conditioned on the earlier ones appended
        as student turns, with no teacher reply in between.
        """
        actions = [m.group(0) for m in _ACTION.finditer(target_text)]
        if not actions:
            raise ValueError(f"target {target_text!r} contains no toy action")
        obs = tuple(observation)
        total = 0.0
        for text in actions:
            a = self.action_index(text)
            if a is None:
                return float("-inf")
            total += self.log_prob(obs, a)
            obs = obs + ((STUDENT, text),)
        return total

    # gradients

    def grad_log_prob(self, feats, a: int) -> np.ndarray:
        p = softmax(self.encoder.logits(self._theta, feats))
        g = -p
        g[a] += 1.0
        return self.encoder.vjp(feats, g)

    def kl_and_grad(self, feats, reference: ToySoftmaxPolicy) -> tuple[float, np.ndarray]:
        """KL(self || reference) at one observation and its gradient w.r.t. self.theta."""
        lp = log_softmax(self.encoder.logits(self._theta, feats))
        lq = log_softmax(reference.encoder.logits(reference.theta, feats))
        p = np.exp(lp)
        kl = float(p @ (lp - lq))
        return kl, self.encoder.vjp(feats, p * (lp - lq - kl))

    def kl(self, reference: ToySoftmaxPolicy, observation) -> float:
        return self.kl_and_grad(self.features(observation), reference)[0]

    # copies and persistence

    def snapshot(self) -> ReferenceSnapshot:
        return ReferenceSnapshot(self)

    def copy(self) -> ToySoftmaxPolicy:
        return ToySoftmaxPolicy(
            self.M, self.encoder_name, self.seed, self._theta.copy(), self.tmax, self.default_temperature, self.version
        )

    def to_dict(self) -> dict:
        return {
            "kind": TOY_SOFTMAX,
            "M": self.M,
            "encoder": self.encoder_name,
            "seed": self.seed,
            "tmax": self.tmax,
            "version": self.version,
            "theta": self._theta.tolist(),
        }

    def save(self, path) -> None:
        """JSON checkpoint; floats round-trip exactly and the bytes are reproducible."""
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> ToySoftmaxPolicy:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        return cls(M=int(d["M"]), encoder=d["encoder"], seed=int(d["seed"]), theta=np.array(d["theta"]),
                   tmax=int(d["tmax"]), version=int(d["version"]))


class ReferenceSnapshot(ToySoftmaxPolicy):
    """Frozen copy of a toy policy, used as the KL reference."""

    kind = REFERENCE_SNAPSHOT

    def __init__(self, source: ToySoftmaxPolicy):
        super().__init__(
            source.M, source.encoder_name, source.seed, source.theta.copy(), source.tmax,
            source.default_temperature, source.version,
        )
        self._theta.flags.writeable = False

    def set_theta(self, theta):
        raise TypeError("reference snapshots are immutable")
