"""Chat-completion gateway over interchangeable backends.

Two backends ship: :class:`ScriptedBackend` (deterministic, file driven, for
tests and fixture runs) and :class:`HttpBackend` (an OpenAI-style
``/chat/completions`` endpoint configured from the environment).
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
import unicodedata
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Protocol, Sequence

import httpx

logger = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant")
DEFAULT_TEMPERATURE = 0.5
DEFAULT_SEED = 111


class BackendError(RuntimeError):
    """Base class for unrecoverable backend failures."""


class RetriesExhausted(BackendError):
    pass


class AuthenticationFailed(BackendError):
    pass


class RequestTooLarge(BackendError):
    pass


class ScriptMiss(BackendError):
    """The scripted backend has no reply for a prompt."""

    def __init__(self, digest: str, reason: str = "no scripted response"):
        self.digest = digest
        super().__init__(f"{reason} for prompt digest {digest}")


class TransientError(Exception):
    """Raised by transports for failures worth retrying."""


@dataclass(frozen=True)
class Message:
    role: str
    content: str

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}; expected one of {ROLES}")

    def to_dict(self) -> dict[str, str]:
        return {"role": self.role, "content": self.content}


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[Message, ...]
    temperature: float = DEFAULT_TEMPERATURE
    seed: int | None = DEFAULT_SEED
    max_output_tokens: int = 1024
    model_id: str = ""

    def __post_init__(self) -> None:
        msgs = tuple(m if isinstance(m, Message) else Message(*m) for m in self.messages)
        object.__setattr__(self, "messages", msgs)
        if not msgs:
            raise ValueError("a chat request needs at least one message")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"temperature {self.temperature} outside [0, 2]")
        if self.max_output_tokens <= 0:
            raise ValueError("max_output_tokens must be positive")

    @property
    def digest(self) -> str:
        return prompt_digest(self.messages)


@dataclass(frozen=True)
class ChatResponse:
    content: str
    backend_id: str
    latency: float = 0.0
    attempt: int = 1


def _normalize(content: str) -> str:
    text = unicodedata.normalize("NFC", content).replace("\r\n", "\n")
    return "\n".join(line.rstrip() for line in text.strip().split("\n"))


def prompt_digest(messages: Iterable[Message | tuple[str, str]]) -> str:
    """sha256 over the normalized (role, content) list."""
    norm = []
    for m in messages:
        role, content = (m.role, m.content) if isinstance(m, Message) else m
        norm.append([role, _normalize(content)])
    blob = json.dumps(norm, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def text_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class Backend(Protocol):
    backend_id: str

    def complete(self, request: ChatRequest) -> ChatResponse: ...


def complete(request: ChatRequest, backend: Backend) -> ChatResponse:
    return backend.complete(request)


# ---------------------------------------------------------------------------
# scripted backend

NEXT_KEY = "*next*"


class ScriptedBackend:
    """Replays canned replies.

    Replies keyed by prompt digest are looked up first.  In non-strict mode,
    records keyed ``*next*`` form an ordered queue consumed one per
    otherwise-unmatched request.  ``strict=True`` disables the queue so every
    prompt must be pinned by digest.
    """

    def __init__(self, entries: Iterable[tuple[str, str]] = (), *, strict: bool = False,
                 backend_id: str = "scripted"):
        self.backend_id = backend_id
        self.strict = strict
        by_digest: dict[str, str] = {}
        queue: list[str] = []
        for key, response in entries:
            if key == NEXT_KEY:
                queue.append(response)
            else:
                by_digest[key] = response
        self._by_digest = by_digest
        self._queue: deque[str] = deque(queue)
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | os.PathLike, *, strict: bool = False,
                  backend_id: str | None = None) -> ScriptedBackend:
        path = Path(path)
        entries = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    entries.append((str(rec["key"]), str(rec["response"])))
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise ValueError(f"{path}:{lineno}: bad script record ({exc})") from None
        return cls(entries, strict=strict, backend_id=backend_id or f"scripted:{path.stem}")

    @classmethod
    def queue(cls, responses: Sequence[str], backend_id: str = "scripted") -> ScriptedBackend:
        return cls([(NEXT_KEY, r) for r in responses], backend_id=backend_id)

    @property
    def sequential(self) -> bool:
        """True when replies depend on call order (queue entries present)."""
        return bool(self._queue) and not self.strict

    @property
    def remaining(self) -> int:
        return len(self._queue)

    def complete(self, request: ChatRequest) -> ChatResponse:
        digest = request.digest
        reply = self._by_digest.get(digest)
        if reply is None:
            if self.strict:
                raise ScriptMiss(digest, "strict script has no response")
            with self._lock:
                if not self._queue:
                    raise ScriptMiss(digest, "script exhausted")
                reply = self._queue.popleft()
        return ChatResponse(content=reply, backend_id=self.backend_id)


class FunctionBackend:
    """Backend driven by a Python callable; handy for rule-based fakes."""

    def __init__(self, fn: Callable[[ChatRequest], str], backend_id: str = "function"):
        self.fn = fn
        self.backend_id = backend_id

    def complete(self, request: ChatRequest) -> ChatResponse:
        return ChatResponse(content=self.fn(request), backend_id=self.backend_id)


# ---------------------------------------------------------------------------
# live HTTP backend

class TokenBucket:
    """Classic token bucket; ``rate`` tokens per second up to ``capacity``."""

    def __init__(self, rate: float, capacity: float, clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep):
        self.rate = rate
        self.capacity = capacity
        self._tokens = capacity
        self._clock = clock
        self._sleep = sleep
        self._last = clock()
        self._lock = threading.Lock()

    def acquire(self, tokens: float = 1.0) -> None:
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(self.capacity, self._tokens + (now - self._last) * self.rate)
                self._last = now
                if self._tokens >= tokens:
                    self._tokens -= tokens
                    return
                wait = (tokens - self._tokens) / self.rate
            self._sleep(wait)


@dataclass
class HttpProfile:
    base_url: str
    api_key: str
    model: str
    max_retries: int = 4
    backoff_base: float = 1.0
    timeout: float = 120.0
    max_concurrency: int = 4
    requests_per_second: float = 2.0

    @classmethod
    def from_env(cls, name: str, env: dict[str, str] | None = None) -> HttpProfile:
        """Read ``COALNEG_<NAME>_BASE_URL``, ``_API_KEY`` and ``_MODEL``."""
        env = dict(os.environ if env is None else env)
        prefix = f"COALNEG_{name.upper().replace('-', '_')}_"
        missing = [k for k in ("BASE_URL", "MODEL") if prefix + k not in env]
        if missing:
            raise AuthenticationFailed(
                f"backend profile {name!r} not configured; set {', '.join(prefix + k for k in missing)}")
        return cls(
            base_url=env[prefix + "BASE_URL"],
            api_key=env.get(prefix + "API_KEY", ""),
            model=env[prefix + "MODEL"],
            max_retries=int(env.get(prefix + "MAX_RETRIES", 4)),
            max_concurrency=int(env.get(prefix + "MAX_CONCURRENCY", 4)),
            requests_per_second=float(env.get(prefix + "RPS", 2.0)),
        )


class HttpBackend:
    """Chat-completions over HTTP with retry, concurrency cap and rate limit."""

    def __init__(self, profile: HttpProfile, *, client: httpx.Client | None = None,
                 sleep: Callable[[float], None] = time.sleep, backend_id: str | None = None):
        self.profile = profile
        self.backend_id = backend_id or f"http:{profile.model}"
        self._client = client or httpx.Client(timeout=profile.timeout)
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(profile.max_concurrency)
        self._bucket = TokenBucket(profile.requests_per_second,
                                   max(1.0, profile.requests_per_second), sleep=sleep)

    def _payload(self, request: ChatRequest) -> dict[str, Any]:
        payload: dict[str, Any] = {
            "model": request.model_id or self.profile.model,
            "messages": [m.to_dict() for m in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        if request.seed is not None:
            payload["seed"] = request.seed
        return payload

    def _post(self, payload: dict[str, Any]) -> str:
        url = self.profile.base_url.rstrip("/") + "/chat/completions"
        headers = {"Content-Type": "application/json"}
        if self.profile.api_key:
            headers["Authorization"] = f"Bearer {self.profile.api_key}"
        try:
            resp = self._client.post(url, json=payload, headers=headers)
        except httpx.TransportError as exc:
            raise TransientError(str(exc)) from exc
        if resp.status_code in (401, 403):
            raise AuthenticationFailed(f"HTTP {resp.status_code} from {url}")
        if resp.status_code == 413:
            raise RequestTooLarge(f"HTTP 413 from {url}")
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            body = resp.text[:500]
            if "context_length" in body or "maximum context" in body:
                raise RequestTooLarge(body)
            raise BackendError(f"HTTP {resp.status_code}: {body}")
        try:
            return resp.json()["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransientError(f"unexpected response body: {exc}") from exc

    def complete(self, request: ChatRequest) -> ChatResponse:
        payload = self._payload(request)
        last: Exception | None = None
        for attempt in range(1, self.profile.max_retries + 2):
            self._bucket.acquire()
            with self._slots:
                start = time.monotonic()
                try:
                    content = self._post(payload)
                except TransientError as exc:
                    last = exc
                    logger.warning("transient failure (attempt %d): %s", attempt, exc)
                else:
                    return ChatResponse(content=content, backend_id=self.backend_id,
                                        latency=time.monotonic() - start, attempt=attempt)
            if attempt <= self.profile.max_retries:
                self._sleep(self.profile.backoff_base * 2 ** (attempt - 1))
        raise RetriesExhausted(f"gave up after {self.profile.max_retries + 1} attempts: {last}")


def backend_from_spec(spec: str, *, env: dict[str, str] | None = None) -> Backend:
    """Build a backend from ``scripted:<path>`` / ``scripted-strict:<path>`` / ``http:<profile>``."""
    kind, _, arg = spec.partition(":")
    if not arg:
        raise ValueError(f"backend spec {spec!r} must look like scripted:<path> or http:<profile>")
    if kind == "scripted":
        return ScriptedBackend.from_file(arg)
    if kind == "scripted-strict":
        return ScriptedBackend.from_file(arg, strict=True)
    if kind == "http":
        return HttpBackend(HttpProfile.from_env(arg, env), backend_id=f"http:{arg}")
    raise ValueError(f"unknown backend kind {kind!r}; expected scripted, scripted-strict or http")


@dataclass
class CallSettings:
    """Per-run request defaults threaded through every component."""

    temperature: float = DEFAULT_TEMPERATURE
    seed: int | None = DEFAULT_SEED
    max_output_tokens: int = 1024
    model_id: str = ""
    extra: dict[str, Any] = field(default_factory=dict)

    def request(self, messages: Sequence[Message | tuple[str, str]]) -> ChatRequest:
        return ChatRequest(tuple(messages), self.temperature, self.seed,
                           self.max_output_tokens, self.model_id)
