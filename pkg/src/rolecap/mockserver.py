"""Deterministic scripted chat-completion endpoint for tests.

Responses are keyed by request fingerprint (see gateway.request_fingerprint),
so a test scripts behaviour by building the same request body the client
will send. Unscripted requests get a 404 that echoes the fingerprint, which
makes script mismatches easy to diagnose.
"""

from __future__ import annotations

import json
import threading
import time
from collections import deque
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .gateway import request_fingerprint

__all__ = ["MockResponse", "MockEndpoint", "completion_document"]


@dataclass(frozen=True)
class MockResponse:
    """One canned reply: a chat completion when status is 2xx, else an error body.

    ``document`` overrides the generated body entirely (malformed-response
    scenarios).
    """

    status: int = 200
    text: str = ""
    document: dict | None = None

    def body(self) -> dict:
        if self.document is not None:
            return self.document
        if 200 <= self.status < 300:
            return completion_document(self.text)
        return {"error": {"message": self.text or f"scripted status {self.status}"}}


def completion_document(text: str, *, n_choices: int = 1) -> dict:
    choices = [
        {"index": i, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}
        for i in range(n_choices)
    ]
    return {"object": "chat.completion", "choices": choices}


def _coerce(entry) -> MockResponse:
    if isinstance(entry, MockResponse):
        return entry
    if isinstance(entry, str):
        return MockResponse(status=200, text=entry)
    raise TypeError(f"script entries must be str or MockResponse, got {type(entry).__name__}")


class MockEndpoint:
    """In-process HTTP server speaking the chat-completions wire shape.

    script maps fingerprint -> str | MockResponse | sequence thereof.
    Sequences are consumed one per request and the final entry repeats once
    exhausted (so "429, 429, ok" keeps answering ok). The server tracks a
    call log and an in-flight gauge; ``latency`` holds each request open so
    concurrency caps become observable.
    """

    def __init__(self, script: dict | None = None, *, latency: float = 0.0) -> None:
        self._scripts: dict[str, deque[MockResponse]] = {}
        self._lock = threading.Lock()
        self.latency = latency
        self.call_log: list[dict] = []
        self.in_flight = 0
        self.max_in_flight = 0
        self._server: ThreadingHTTPServer | None = None
        self._thread: threading.Thread | None = None
        for fingerprint, entry in (script or {}).items():
            self.add(fingerprint, entry)

    def add(self, fingerprint: str, entry) -> None:
        entries = entry if isinstance(entry, (list, tuple)) else [entry]
        with self._lock:
            self._scripts[fingerprint] = deque(_coerce(e) for e in entries)

    def add_for_body(self, body: dict, entry) -> str:
        """Script a response for the request this exact body will produce."""
        fingerprint = request_fingerprint(body)
        self.add(fingerprint, entry)
        return fingerprint

    # -- server lifecycle ---------------------------------------------------

    @property
    def base_url(self) -> str:
        assert self._server is not None, "endpoint not started"
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}/v1"

    def start(self) -> "MockEndpoint":
        endpoint = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, fmt, *args):  # silence request logging
                pass

            def do_POST(self) -> None:
                length = int(self.headers.get("Content-Length", "0"))
                raw = self.rfile.read(length)
                try:
                    body = json.loads(raw.decode("utf-8"))
                except ValueError:
                    self._send(400, {"error": {"message": "request body is not JSON"}})
                    return
                fingerprint = request_fingerprint(body)
                with endpoint._lock:
                    endpoint.in_flight += 1
                    endpoint.max_in_flight = max(endpoint.max_in_flight, endpoint.in_flight)
                    endpoint.call_log.append({"fingerprint": fingerprint, "body": body})
                try:
                    if endpoint.latency:
                        time.sleep(endpoint.latency)
                    response = endpoint._next_response(fingerprint)
                    if response is None:
                        self._send(
                            404,
                            {
                                "error": {
                                    "message": "unscripted request",
                                    "fingerprint": fingerprint,
                                }
                            },
                        )
                    else:
                        self._send(response.status, response.body())
                finally:
                    with endpoint._lock:
                        endpoint.in_flight -= 1

            def _send(self, status: int, payload: dict) -> None:
                data = json.dumps(payload).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def _next_response(self, fingerprint: str) -> MockResponse | None:
        with self._lock:
            queue = self._scripts.get(fingerprint)
            if not queue:
                return None
            return queue.popleft() if len(queue) > 1 else queue[0]

    def stop(self) -> None:
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
            self._server = None
        if self._thread is not None:
            self._thread.join(timeout=5)
            self._thread = None

    def __enter__(self) -> "MockEndpoint":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
