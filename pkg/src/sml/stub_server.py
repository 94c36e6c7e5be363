"""A small chat-completions server for tests and demos.

It plays the guessing game on both sides: as a student (no system preamble)
it bisects the interval implied by the conversation, and as a teacher (system
preamble starting "You are a teacher") it reads the secret from the preamble
and answers higher/lower. ``/v1/score`` returns the uniform log-probability
of the target's actions.

Faults are triggered by markers anywhere in the messages:
``[[FAULT:timeout]]``, ``[[FAULT:malformed]]``, ``[[FAULT:500]]``,
``[[FAULT:empty]]`` and ``[[FAULT:flaky]]`` (first request per body fails with
500). A ``student-`` or ``teacher-`` prefix restricts a fault to that side.
Every decoded request body is kept in ``requests``.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .tasks.checking import extract_guess
from .tasks.toy import ASK_TEXT, midpoint_hint, read_toy

_FAULT = re.compile(r"\[\[FAULT:(?:(student|teacher)-)?(timeout|malformed|500|empty|flaky)\]\]")
_RANGE = re.compile(r"between 0 and (\d+)")
_SECRET = re.compile(r"ground-truth solution is: (-?\d+)")
_ACTION = re.compile(r"GUESS\s+-?\d+|" + re.escape(ASK_TEXT))


def _side(messages) -> str:
    first = messages[0] if messages else {}
    is_teacher = first.get("role") == "system" and str(first.get("content", "")).startswith("You are a teacher")
    return "teacher" if is_teacher else "student"


def _domain(messages) -> int:
    for m in messages:
        found = _RANGE.search(str(m.get("content", "")))
        if found:
            return int(found.group(1)) + 1
    return 64


def student_reply(messages) -> str:
    M = _domain(messages)
    obs = [("teacher" if m["role"] == "user" else "student", m["content"]) for m in messages if m["role"] != "system"]
    return f"GUESS {read_toy(obs, M).midpoint}"


def teacher_reply(messages) -> str:
    found = _SECRET.search(str(messages[0].get("content", "")))
    if not found:
        return "Please try again."
    secret = int(found.group(1))
    last = str(messages[-1].get("content", ""))
    guess = extract_guess(last)
    if guess is None:
        M = _domain(messages)
        obs = [("teacher" if m["role"] == "assistant" else "student", m["content"]) for m in messages[1:]]
        view = read_toy(obs, M)
        return midpoint_hint(secret, view.lo, view.hi)
    if guess == secret:
        return "Correct."
    return "higher" if guess < secret else "lower"


class _Handler(BaseHTTPRequestHandler):
    server: StubServer

    def log_message(self, fmt, *args):
        pass

    def _send(self, status: int, payload: bytes, content_type: str = "application/json"):
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def _json(self, status: int, obj):
        self._send(status, json.dumps(obj).encode("utf-8"))

    def do_POST(self):  # noqa: N802
        srv = self.server
        raw = self.rfile.read(int(self.headers.get("Content-Length") or 0))
        if srv.token and self.headers.get("Authorization") != f"Bearer {srv.token}":
            return self._json(401, {"error": "unauthorized"})
        try:
            body = json.loads(raw)
            messages = body["messages"]
        except (ValueError, KeyError, TypeError):
            return self._json(400, {"error": "bad request"})
        srv.record(self.path, body)
        side = _side(messages)

        blob = " ".join(str(m.get("content", "")) for m in messages)
        for only, fault in _FAULT.findall(blob):
            if only and only != side:
                continue
            if fault == "timeout":
                time.sleep(srv.fault_delay)
                return self._json(200, {"error": "too late"})
            if fault == "malformed":
                return self._send(200, b'{"choices": [ not json', "application/json")
            if fault == "500":
                return self._json(500, {"error": "injected"})
            if fault == "empty":
                return self._json(200, {"choices": []})
            if fault == "flaky" and srv.first_time(raw):
                return self._json(500, {"error": "flaky"})

        if self.path.rstrip("/") == "/v1/score":
            n_actions = len(_ACTION.findall(str(body.get("target", ""))))
            return self._json(200, {"logprob": -n_actions * math.log(_domain(messages) + 1)})
        if self.path.rstrip("/") != "/v1/chat/completions":
            return self._json(404, {"error": "not found"})
        text = teacher_reply(messages) if side == "teacher" else student_reply(messages)
        return self._json(200, {
            "id": f"stub-{srv.count}",
            "object": "chat.completion",
            "model": body.get("model", "stub"),
            "choices": [{"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}],
        })


class StubServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, host: str = "127.0.0.1", port: int = 0, token: str | None = None, fault_delay: float = 2.0):
        super().__init__((host, port), _Handler)
        self.token = token
        self.fault_delay = fault_delay
        self.requests: list[tuple[str, dict]] = []
        self._lock = threading.Lock()
        self._seen: set[str] = set()
        self._thread: threading.Thread | None = None

    @property
    def url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"

    @property
    def count(self) -> int:
        return len(self.requests)

    def record(self, path: str, body: dict) -> None:
        with self._lock:
            self.requests.append((path, body))

    def first_time(self, raw: bytes) -> bool:
        key = hashlib.sha256(raw).hexdigest()
        with self._lock:
            if key in self._seen:
                return False
            self._seen.add(key)
            return True

    def handle_error(self, request, client_address):
        # clients that timed out have hung up; nothing to report
        pass

    def start(self) -> StubServer:
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()

    def __enter__(self) -> StubServer:
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
