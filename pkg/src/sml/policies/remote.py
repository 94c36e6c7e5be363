"""Chat-completions client usable as a student, a teacher, a judge or a question writer.

As a student the request carries only the public conversation, with teacher
turns sent as ``user`` and student turns as ``assistant``. As a teacher the
roles flip and the private knowledge goes into a system preamble.
"""

from __future__ import annotations

import os
import threading
from typing import Sequence

import httpx
import numpy as np

from ..dialogue import GROUND_TRUTH, SHARD_QUEUE, STUDENT, TEACHER, VERIFIER_LOG, PrivateKnowledge
from ..errors import NotScoringCapable, PolicyFailure, RemoteFailure, RemoteMalformed, RemoteTimeout
from .base import REMOTE, Policy, TeacherPolicy

ENV_URL = "SML_API_URL"
ENV_TOKEN = "SML_API_TOKEN"

CHAT_PATH = "/v1/chat/completions"
SCORE_PATH = "/v1/score"


def teacher_preamble(knowledge: PrivateKnowledge, guard: bool = True) -> str:
    if knowledge.kind == GROUND_TRUTH:
        text = f"You are a teacher; the ground-truth solution is: {knowledge.payload}"
    elif knowledge.kind == VERIFIER_LOG:
        reports = "\n".join(knowledge.payload) or "(no attempts checked yet)"
        text = f"You are a teacher; the verifier reports for the student's attempts so far are:\n{reports}"
    elif knowledge.kind == SHARD_QUEUE:
        if knowledge.payload:
            text = (
                "You are a teacher; reply with exactly the next part of the problem and nothing else. "
                f"The next part is: {knowledge.payload[0]}"
            )
        else:
            text = "You are a teacher; every part of the problem has been given"
    else:
        text = "You are a teacher"
    if guard and knowledge.kind == GROUND_TRUTH:
        text += "; guide without revealing it verbatim."
    return text


def student_messages(observation, system_prompt: str | None = None) -> list[dict]:
    msgs = [{"role": "system", "content": system_prompt}] if system_prompt else []
    for role, text in observation:
        msgs.append({"role": "user" if role == TEACHER else "assistant", "content": text})
    return msgs


def teacher_messages(history, knowledge: PrivateKnowledge, guard: bool = True) -> list[dict]:
    msgs = [{"role": "system", "content": teacher_preamble(knowledge, guard)}]
    for u in history:
        msgs.append({"role": "assistant" if u.role == TEACHER else "user", "content": u.text})
    return msgs


class ChatClient:
    """Thread-safe JSON client with bounded concurrency, a per-request timeout and one retry."""

    def __init__(
        self,
        url: str | None = None,
        model: str = "default",
        token: str | None = None,
        timeout: float = 30.0,
        max_concurrency: int = 8,
        max_tokens: int = 512,
        retries: int = 1,
        transport: httpx.BaseTransport | None = None,
    ):
        url = url or os.environ.get(ENV_URL)
        if not url:
            raise ValueError(f"no endpoint URL given and {ENV_URL} is not set")
        self.url = url.rstrip("/")
        self.model = model
        self.max_tokens = max_tokens
        self.retries = retries
        token = token if token is not None else os.environ.get(ENV_TOKEN)
        headers = {"Authorization": f"Bearer {token}"} if token else {}
        self._http = httpx.Client(base_url=self.url, headers=headers, timeout=timeout, transport=transport)
        self._slots = threading.BoundedSemaphore(max_concurrency)

    def close(self) -> None:
        self._http.close()

    def post(self, path: str, body: dict, extract=None):
        """POST and decode; ``extract`` maps the JSON object to the result and raises RemoteMalformed.

        Any failure, including a malformed body, is retried ``retries`` times.
        """
        last: Exception | None = None
        for _ in range(self.retries + 1):
            try:
                with self._slots:
                    resp = self._http.post(path, json=body)
                if resp.status_code >= 400:
                    raise RemoteFailure(f"HTTP {resp.status_code} from {path}")
                try:
                    data = resp.json()
                except ValueError as exc:
                    raise RemoteMalformed(f"response from {path} is not JSON") from exc
                if not isinstance(data, dict):
                    raise RemoteMalformed(f"response from {path} is not a JSON object")
                return extract(data) if extract is not None else data
            except httpx.TimeoutException as exc:
                last = RemoteTimeout(f"timeout on {path}: {exc}")
            except httpx.HTTPError as exc:
                last = RemoteFailure(f"{type(exc).__name__} on {path}: {exc}")
            except RemoteFailure as exc:
                last = exc
        raise last

    def complete(self, messages: list[dict], temperature: float = 1.0, seed: int | None = None) -> str:
        body = {"model": self.model, "messages": messages, "temperature": temperature, "max_tokens": self.max_tokens}
        if seed is not None:
            body["seed"] = seed
        return self.post(CHAT_PATH, body, _message_content)

    def logprob(self, messages: list[dict], target: str) -> float:
        body = {"model": self.model, "messages": messages, "target": target}
        return self.post(SCORE_PATH, body, _logprob)


def _message_content(data: dict) -> str:
    try:
        content = data["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError):
        content = None
    if not isinstance(content, str) or not content.strip():
        raise RemoteMalformed("chat completion without message content")
    return content.strip()


def _logprob(data: dict) -> float:
    value = data.get("logprob")
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise RemoteMalformed("score response has no numeric logprob")
    return float(value)


def _request_seed(rng: np.random.Generator | None) -> int | None:
    return int(rng.integers(2**31)) if rng is not None else None


class RemoteChatPolicy(Policy):
    kind = REMOTE

    def __init__(self, client: ChatClient, seed: int = 0, temperature: float = 1.0, system_prompt: str | None = None,
                 scoring: bool = False):
        self.client = client
        self.seed = seed
        self.default_temperature = temperature
        self.system_prompt = system_prompt
        self.scoring_capable = scoring

    def act(self, observation, temperature=None, rng=None) -> str:
        temperature = self.default_temperature if temperature is None else temperature
        msgs = student_messages(observation, self.system_prompt)
        return self.client.complete(msgs, temperature, _request_seed(rng))

    def score(self, observation, target_text: str) -> float:
        if not self.scoring_capable:
            raise NotScoringCapable("no scoring endpoint configured")
        return self.client.logprob(student_messages(observation, self.system_prompt), target_text)


class RemoteTeacher(TeacherPolicy):
    kind = REMOTE

    def __init__(self, client: ChatClient, seed: int = 0, temperature: float = 0.7, guard: bool = True):
        self.client = client
        self.seed = seed
        self.temperature = temperature
        self.guard = guard

    def reply(self, task, history: Sequence, knowledge: PrivateKnowledge, rng=None) -> str:
        if not history or history[-1].role != STUDENT:
            raise PolicyFailure("the teacher replies to a student utterance")
        msgs = teacher_messages(history, knowledge, self.guard)
        return self.client.complete(msgs, self.temperature, _request_seed(rng))
