"""Deterministic local stand-in for a chat-completions endpoint.

Responses are a pure function of (question, prompted topology, request
seed), so pipeline runs against it are reproducible. The server counts hits
and records the peak number of in-flight requests.
"""

from __future__ import annotations

import hashlib
import json
import re
import threading
import time
from collections import deque
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Iterable

from topotrace.errors import LeakageError
from topotrace.genclient.templates import strip_topology_instructions
from topotrace.records import Question

_TOPOLOGY_LINE = re.compile(r"^TOPOLOGY: (chain|tree|graph)$", re.MULTILINE)

_WORDS = (
    "count the cubes in the front row then compare the hidden layer with the visible faces "
    "measure each side note the shared angle apply the rule to the pattern check the parity "
    "sum the totals and verify against the figure before moving on"
).split()


def _u(*parts) -> float:
    h = hashlib.sha256("\x1f".join(map(str, parts)).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "big") / 2**64


def _phrase(n: int, *salt) -> str:
    return " ".join(_WORDS[int(_u(i, *salt) * len(_WORDS))] for i in range(n))


def _wrong_answer(q: Question, salt) -> str:
    if q.qtype == "multiple-choice":
        n = len(q.choices) if q.choices else 5
        letters = "ABCDE"[:n]
        others = [c for c in letters if c != q.ground_truth.strip().upper()]
        return others[int(_u("wrong", salt) * len(others))]
    try:
        return repr(float(q.ground_truth) + 1 + int(_u("wrong", salt) * 5))
    except ValueError:
        return "unknown"


def synth_response(q: Question, topology: str, seed: int) -> str:
    """A canonical-grammar answer whose structure matches ``topology``.

    Each (question, topology) has its own success rate; the seed decides
    each sample. Chain traces are longer than tree and graph traces.
    """
    p_correct = _u("rate", q.id, topology)
    correct = _u("draw", q.id, topology, seed) < p_correct
    answer = q.ground_truth if correct else _wrong_answer(q, (q.id, topology, seed))
    salt = (q.id, topology, seed)
    lines = [f"TOPOLOGY: {topology}"]
    if topology == "chain":
        n = 5 + int(_u("n", *salt) * 5)
        for i in range(n):
            text = _phrase(8 + int(_u("w", i, *salt) * 10), i, *salt)
            lines.append(f"NODE s{i}: {text}" if i == 0 else f"NODE s{i} PARENT s{i - 1}: {text}")
    elif topology == "tree":
        lines.append(f"NODE r: {_phrase(6, 'root', *salt)}")
        k = 2 + int(_u("k", *salt) * 2)
        for i in range(k):
            lines.append(f"NODE b{i} PARENT r: {_phrase(4 + int(_u('w', i, *salt) * 6), i, *salt)}")
    else:
        lines.append(f"NODE a: {_phrase(5, 'a', *salt)}")
        lines.append(f"NODE b PARENT a: {_phrase(5, 'b', *salt)}")
        lines.append(f"NODE c PARENT a: {_phrase(5, 'c', *salt)}")
        lines.append(f"NODE d PARENT b,c: {_phrase(4 + int(_u('w', *salt) * 5), 'd', *salt)}")
        if _u("edge", *salt) < 0.5:
            lines.append("EDGE b -- c")
    lines.append(f"ANSWER: {answer}")
    body = "\n".join(lines)
    if _u("prose", *salt) < 0.2:
        body = "Let me work through this carefully.\n" + body
    return body


class MockEndpoint:
    """Threaded HTTP server answering ``POST /v1/chat/completions``.

    ``script`` is a list of HTTP statuses returned (in order) before normal
    service starts; ``fail_after`` makes every request after that many
    successful completions return 503. ``delay`` holds each request open to
    make concurrency observable.
    """

    def __init__(
        self,
        questions: Iterable[Question],
        host: str = "127.0.0.1",
        port: int = 0,
        delay: float = 0.0,
        script: Iterable[int] = (),
        fail_after: int | None = None,
        require_key: str | None = None,
    ):
        self.by_text = {q.text(): q for q in questions}
        self.delay = delay
        self.script = deque(script)
        self.fail_after = fail_after
        self.require_key = require_key
        self.hits = 0
        self.completions = 0
        self.in_flight = 0
        self.max_in_flight = 0
        self.bodies: list[dict] = []
        self._lock = threading.Lock()
        self._server = ThreadingHTTPServer((host, port), self._handler())
        self._server.daemon_threads = True
        self._thread: threading.Thread | None = None

    @property
    def url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def reset_counters(self) -> None:
        with self._lock:
            self.hits = self.completions = self.max_in_flight = 0
            self.bodies.clear()

    def start(self) -> MockEndpoint:
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()

    def __enter__(self) -> MockEndpoint:
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    def complete(self, body: dict) -> tuple[int, dict]:
        content = body["messages"][-1]["content"]
        if isinstance(content, list):
            content = "".join(p.get("text", "") for p in content if p.get("type") == "text")
        m = _TOPOLOGY_LINE.search(content)
        try:
            question_text = strip_topology_instructions(content)
        except LeakageError:
            return 400, {"error": {"message": "prompt does not match a known template"}}
        q = self.by_text.get(question_text)
        if m is None or q is None:
            return 400, {"error": {"message": "unknown question or topology"}}
        text = synth_response(q, m.group(1), int(body.get("seed", 0)))
        return 200, {
            "id": "mock-" + hashlib.sha256(text.encode()).hexdigest()[:12],
            "object": "chat.completion",
            "created": 0,
            "model": body.get("model", "mock"),
            "choices": [{"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}],
            "usage": {"prompt_tokens": len(content.split()), "completion_tokens": len(text.split())},
        }

    def _handler(self):
        endpoint = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):  # silence stderr access log
                pass

            def _send(self, status: int, obj: dict) -> None:
                data = json.dumps(obj).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                raw = self.rfile.read(length)
                with endpoint._lock:
                    endpoint.hits += 1
                    endpoint.in_flight += 1
                    endpoint.max_in_flight = max(endpoint.max_in_flight, endpoint.in_flight)
                    scripted = endpoint.script.popleft() if endpoint.script else None
                    exhausted = endpoint.fail_after is not None and endpoint.completions >= endpoint.fail_after
                try:
                    status, obj = self._respond(raw, scripted, exhausted)
                finally:
                    # leave the in-flight set before the client can see the reply
                    with endpoint._lock:
                        endpoint.in_flight -= 1
                self._send(status, obj)

            def _respond(self, raw: bytes, scripted: int | None, exhausted: bool) -> tuple[int, dict]:
                if endpoint.delay:
                    time.sleep(endpoint.delay)
                if self.path.rstrip("/") != "/v1/chat/completions":
                    return 404, {"error": {"message": "not found"}}
                if endpoint.require_key is not None and self.headers.get("Authorization") != f"Bearer {endpoint.require_key}":
                    return 401, {"error": {"message": "bad key"}}
                if scripted is not None:
                    return scripted, {"error": {"message": f"scripted {scripted}"}}
                if exhausted:
                    return 503, {"error": {"message": "unavailable"}}
                body = json.loads(raw)
                with endpoint._lock:
                    endpoint.bodies.append(body)
                status, obj = endpoint.complete(body)
                if status == 200:
                    with endpoint._lock:
                        endpoint.completions += 1
                return status, obj

        return Handler
