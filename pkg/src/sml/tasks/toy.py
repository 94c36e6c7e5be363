"""Reading the guessing game's public transcript.

Both the toy student and the scripted teacher need the interval of secrets
still consistent with the feedback spoken so far. It is computed from public
text only, so it is safe to use on the student side.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Sequence

from .checking import extract_guess

ASK_TEXT = "Can you give me a hint about the range?"

FEEDBACK_NONE = 0
FEEDBACK_HIGHER = 1
FEEDBACK_LOWER = 2
FEEDBACK_HINT = 3
FEEDBACK_OTHER = 4
N_FEEDBACK = 5

_ABOVE = re.compile(r"\babove (-?\d+)\b", re.IGNORECASE)
_AT_MOST = re.compile(r"\bat most (-?\d+)\b", re.IGNORECASE)
_HIGHER = re.compile(r"\bhigher\b", re.IGNORECASE)
_LOWER = re.compile(r"\blower\b", re.IGNORECASE)


@dataclass(frozen=True)
class ToyView:
    lo: int
    hi: int
    turn: int
    last_feedback: int
    guesses: tuple[int, ...] = ()

    @property
    def width(self) -> int:
        return self.hi - self.lo + 1

    @property
    def midpoint(self) -> int:
        return (self.lo + self.hi) // 2


def read_toy(observation: Sequence, M: int) -> ToyView:
    """Consistent interval, turn index and last feedback token from (role, text) pairs."""
    lo, hi = 0, M - 1
    last_guess = None
    last_fb = FEEDBACK_NONE
    guesses = []
    turn = 1
    seen_student = False
    for role, text in observation:
        if role == "student":
            seen_student = True
            turn += 1
            last_guess = extract_guess(text)
            if last_guess is not None:
                guesses.append(last_guess)
            continue
        if not seen_student:
            continue
        new_lo, new_hi = lo, hi
        ab, am = _ABOVE.search(text), _AT_MOST.search(text)
        if ab or am:
            last_fb = FEEDBACK_HINT
            if ab:
                new_lo = max(lo, int(ab.group(1)) + 1)
            if am:
                new_hi = min(hi, int(am.group(1)))
        elif last_guess is not None and _HIGHER.search(text):
            last_fb = FEEDBACK_HIGHER
            new_lo = max(lo, last_guess + 1)
        elif last_guess is not None and _LOWER.search(text):
            last_fb = FEEDBACK_LOWER
            new_hi = min(hi, last_guess - 1)
        else:
            last_fb = FEEDBACK_OTHER
        # contradictory feedback is ignored rather than emptying the interval
        if new_lo <= new_hi:
            lo, hi = new_lo, new_hi
    return ToyView(lo, hi, turn, last_fb, tuple(guesses))


def midpoint_hint(secret: int, lo: int, hi: int) -> str:
    m = (lo + hi) // 2
    return f"The number is above {m}." if secret > m else f"The number is at most {m}."
