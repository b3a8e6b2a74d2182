"""Client for OpenAI-compatible multimodal chat-completion endpoints.

One gateway class serves both caption generation and filter scoring; it does
not bundle or assume any particular model. Images travel inline as base64
data URLs, so no separate upload channel is needed.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
import random
import threading
import time
from dataclasses import dataclass, field

import requests

__all__ = [
    "SamplingParams",
    "EndpointConfig",
    "ImagePayload",
    "ChatTurn",
    "GatewayError",
    "TransportError",
    "HTTPStatusError",
    "EmptyChoicesError",
    "GatewayStats",
    "ChatGateway",
    "default_generation_params",
    "build_request_body",
    "request_fingerprint",
    "complete_chat",
]


class GatewayError(Exception):
    """Base class for endpoint client failures."""


class TransportError(GatewayError):
    """Network-level failure that persisted through all retries."""


class HTTPStatusError(GatewayError):
    """Non-2xx response; the payload is surfaced for inspection."""

    def __init__(self, status: int, payload: str) -> None:
        super().__init__(f"endpoint returned HTTP {status}: {payload[:500]}")
        self.status = status
        self.payload = payload


class EmptyChoicesError(GatewayError):
    """A 2xx response that carried no choices."""


@dataclass(frozen=True)
class SamplingParams:
    top_k: int
    top_p: float
    temperature: float
    repetition_penalty: float
    presence_penalty: float
    frequency_penalty: float

    def __post_init__(self) -> None:
        if self.top_k < 1:
            raise ValueError(f"top_k must be >= 1, got {self.top_k}")
        if not (0 < self.top_p <= 1):
            raise ValueError(f"top_p must be in (0, 1], got {self.top_p}")
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")


def default_generation_params() -> SamplingParams:
    """Near-greedy decoding defaults used for caption generation."""
    return SamplingParams(
        top_k=1,
        top_p=0.001,
        temperature=0.01,
        repetition_penalty=1.0,
        presence_penalty=1.5,
        frequency_penalty=0.0,
    )


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    model_name: str
    api_key_source: str = ""
    timeout: float = 120.0
    max_retries: int = 3
    max_concurrency: int = 4

    def __post_init__(self) -> None:
        if self.max_concurrency < 1:
            raise ValueError(f"max_concurrency must be >= 1, got {self.max_concurrency}")
        if self.max_retries < 0:
            raise ValueError(f"max_retries must be >= 0, got {self.max_retries}")


@dataclass(frozen=True)
class ImagePayload:
    data: bytes
    media_type: str = "image/png"

    def to_data_url(self) -> str:
        encoded = base64.b64encode(self.data).decode("ascii")
        return f"data:{self.media_type};base64,{encoded}"


_TURN_ROLES = ("system", "user", "assistant")


@dataclass(frozen=True)
class ChatTurn:
    role: str
    text: str
    image: ImagePayload | None = None

    def __post_init__(self) -> None:
        if self.role not in _TURN_ROLES:
            raise ValueError(f"turn role must be one of {_TURN_ROLES}, got {self.role!r}")
        if self.image is not None and self.role != "user":
            raise ValueError("images are allowed only on user turns")


def build_request_body(model_name: str, turns: list[ChatTurn], params: SamplingParams) -> dict:
    """Assemble the chat-completion request document.

    Pure: the same (turns, params) always yield the same body. Text-only
    turns use plain string content; turns with an image use content parts
    with an inline data URL.
    """
    if not turns:
        raise ValueError("turns must be non-empty")
    messages = []
    for turn in turns:
        if turn.image is None:
            content: object = turn.text
        else:
            content = [
                {"type": "text", "text": turn.text},
                {"type": "image_url", "image_url": {"url": turn.image.to_data_url()}},
            ]
        messages.append({"role": turn.role, "content": content})
    return {
        "model": model_name,
        "messages": messages,
        "top_k": params.top_k,
        "top_p": params.top_p,
        "temperature": params.temperature,
        "repetition_penalty": params.repetition_penalty,
        "presence_penalty": params.presence_penalty,
        "frequency_penalty": params.frequency_penalty,
    }


def request_fingerprint(body: dict) -> str:
    """Hex digest identifying a request body, independent of key order.

    The mock endpoint applies the same function to incoming requests, so a
    test can script responses by building bodies with build_request_body.
    """
    canonical = json.dumps(body, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass
class GatewayStats:
    requests: int = 0
    retries: int = 0
    failures: int = 0


_RETRYABLE_STATUS = frozenset({429} | set(range(500, 600)))


class ChatGateway:
    """Thread-safe endpoint client with a global in-flight cap and retries.

    Transient failures (timeouts, connection errors, HTTP 429/5xx) back off
    exponentially with full jitter: sleep ~ U(0, base * factor^attempt),
    base 1s, factor 2. Other non-2xx statuses fail immediately. Response
    text passes through verbatim.
    """

    def __init__(
        self,
        cfg: EndpointConfig,
        *,
        session: requests.Session | None = None,
        sleeper=time.sleep,
        rng: random.Random | None = None,
        backoff_base: float = 1.0,
    ) -> None:
        self.cfg = cfg
        self.stats = GatewayStats()
        self._session = session or requests.Session()
        self._sleeper = sleeper
        self._rng = rng or random.Random()
        self._backoff_base = backoff_base
        self._gate = threading.Semaphore(cfg.max_concurrency)
        self._lock = threading.Lock()

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.cfg.api_key_source, "") if self.cfg.api_key_source else ""
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _count(self, **deltas: int) -> None:
        with self._lock:
            for name, delta in deltas.items():
                setattr(self.stats, name, getattr(self.stats, name) + delta)

    def complete(self, turns: list[ChatTurn], params: SamplingParams) -> str:
        body = build_request_body(self.cfg.model_name, turns, params)
        url = self.cfg.base_url.rstrip("/") + "/chat/completions"
        with self._gate:
            self._count(requests=1)
            last_error: GatewayError | None = None
            for attempt in range(self.cfg.max_retries + 1):
                if attempt > 0:
                    self._count(retries=1)
                    self._sleeper(self._rng.uniform(0, self._backoff_base * (2 ** (attempt - 1))))
                try:
                    resp = self._session.post(
                        url, json=body, headers=self._headers(), timeout=self.cfg.timeout
                    )
                except requests.RequestException as exc:
                    last_error = TransportError(str(exc))
                    continue
                if resp.status_code in _RETRYABLE_STATUS:
                    last_error = HTTPStatusError(resp.status_code, resp.text)
                    continue
                if not (200 <= resp.status_code < 300):
                    self._count(failures=1)
                    raise HTTPStatusError(resp.status_code, resp.text)
                return self._extract_text(resp)
            self._count(failures=1)
            assert last_error is not None
            raise last_error

    @staticmethod
    def _extract_text(resp: requests.Response) -> str:
        try:
            document = resp.json()
        except ValueError as exc:
            raise GatewayError(f"endpoint returned non-JSON body: {resp.text[:200]}") from exc
        choices = document.get("choices") or []
        if not choices:
            raise EmptyChoicesError(f"response carried no choices: {resp.text[:200]}")
        message = choices[0].get("message") or {}
        content = message.get("content")
        if not isinstance(content, str):
            raise GatewayError(f"first choice carried no text content: {resp.text[:200]}")
        return content


def complete_chat(cfg: EndpointConfig, turns: list[ChatTurn], params: SamplingParams) -> str:
    """One-shot convenience wrapper around a throwaway ChatGateway."""
    return ChatGateway(cfg).complete(turns, params)
