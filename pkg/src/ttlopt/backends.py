"""Text-generation backends behind one chat-completion interface.

ScriptedBackend is a first-class deterministic implementation (not a test
mock): the whole training pipeline can run offline against it. HttpBackend
talks to any gateway speaking the common chat-completion JSON shape.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass
from string import Template
from typing import Callable, Sequence

import requests

logger = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant")


class BackendError(Exception):
    pass


class TransportError(BackendError):
    """Retryable: the request may succeed if simply tried again."""


class ProviderError(BackendError):
    """Non-retryable: the provider rejected the request; payload surfaced
    verbatim in the message."""


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {self.role!r}")
        if self.role in ("system", "user") and not self.content:
            raise ValueError(f"{self.role} message content must be non-empty")


@dataclass(frozen=True)
class GenerationRequest:
    messages: tuple[ChatMessage, ...]
    model_id: str = "default"
    temperature: float = 0.7
    max_output_tokens: int = 1024
    seed: int | None = None

    def __post_init__(self):
        if not self.messages:
            raise ValueError("request needs at least one message")
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be positive")

    def system_text(self) -> str:
        return next((m.content for m in self.messages if m.role == "system"), "")

    def last_user_text(self) -> str:
        for message in reversed(self.messages):
            if message.role == "user":
                return message.content
        return ""


@dataclass
class BackendStats:
    calls: int = 0
    approx_tokens: int = 0


class Backend:
    """Shared bookkeeping: subclasses implement _complete()."""

    def __init__(self):
        self.stats = BackendStats()
        self._lock = threading.Lock()

    def generate(self, request: GenerationRequest) -> str:
        text = self._complete(request)
        prompt_chars = sum(len(m.content) for m in request.messages)
        with self._lock:
            self.stats.calls += 1
            self.stats.approx_tokens += (prompt_chars + len(text)) // 4
        return text

    def _complete(self, request: GenerationRequest) -> str:
        raise NotImplementedError


@dataclass(frozen=True)
class ScriptedRule:
    """First-match-wins rule: every trigger substring must appear in the
    system prompt + latest user message; the response template may reference
    ${system} and ${user}."""

    trigger: str | tuple[str, ...]
    response: str

    @property
    def trigger_parts(self) -> tuple[str, ...]:
        if isinstance(self.trigger, str):
            return (self.trigger,)
        return tuple(self.trigger)


class ScriptedBackend(Backend):
    def __init__(self, rules: Sequence[ScriptedRule] = (), default_response: str = ""):
        super().__init__()
        self.rules = tuple(rules)
        self.default_response = default_response

    def _complete(self, request: GenerationRequest) -> str:
        system = request.system_text()
        user = request.last_user_text()
        haystack = system + "\n" + user
        for rule in self.rules:
            if all(part in haystack for part in rule.trigger_parts):
                template = rule.response
                break
        else:
            template = self.default_response
        return Template(template).safe_substitute(system=system, user=user)

    @classmethod
    def from_spec(cls, raw: dict) -> "ScriptedBackend":
        rules = []
        for entry in raw.get("rules", []):
            trigger = entry["trigger"]
            if isinstance(trigger, list):
                trigger = tuple(str(t) for t in trigger)
            rules.append(ScriptedRule(trigger=trigger, response=str(entry["response"])))
        return cls(rules=rules, default_response=str(raw.get("default_response", "")))


class HttpBackend(Backend):
    """POSTs chat-completion JSON to a configured URL.

    The API key is read from the named environment variable at request time
    and sent as a bearer token; it is never logged or persisted.
    """

    def __init__(
        self,
        base_url: str,
        headers: dict[str, str] | None = None,
        api_key_env: str | None = None,
        timeout_s: float = 60.0,
        max_in_flight: int = 4,
    ):
        super().__init__()
        self.base_url = base_url
        self.headers = dict(headers or {})
        self.api_key_env = api_key_env
        self.timeout_s = timeout_s
        self._inflight = threading.Semaphore(max_in_flight)

    def _request_headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json", **self.headers}
        if self.api_key_env:
            import os

            key = os.environ.get(self.api_key_env)
            if not key:
                raise ProviderError(
                    f"environment variable {self.api_key_env} is not set"
                )
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _complete(self, request: GenerationRequest) -> str:
        body = {
            "model": request.model_id,
            "messages": [{"role": m.role, "content": m.content} for m in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        if request.seed is not None:
            body["seed"] = request.seed
        with self._inflight:
            try:
                response = requests.post(
                    self.base_url,
                    json=body,
                    headers=self._request_headers(),
                    timeout=self.timeout_s,
                )
            except requests.RequestException as exc:
                raise TransportError(f"request to {self.base_url} failed: {exc}") from exc
        if response.status_code == 429 or response.status_code >= 500:
            raise TransportError(
                f"{self.base_url} answered {response.status_code}: {response.text[:500]}"
            )
        if response.status_code >= 400:
            raise ProviderError(response.text)
        try:
            payload = response.json()
            choice = payload["choices"][0]
            text = choice["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ProviderError(f"malformed completion payload: {response.text[:500]}") from exc
        if choice.get("finish_reason") == "length":
            logger.warning("completion truncated at max_tokens for model %s", request.model_id)
        return text


class RetryingBackend(Backend):
    def __init__(
        self,
        inner: Backend,
        max_attempts: int,
        base_delay_s: float = 0.1,
        max_delay_s: float = 5.0,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        super().__init__()
        self.inner = inner
        self.max_attempts = max_attempts
        self.base_delay_s = base_delay_s
        self.max_delay_s = max_delay_s
        self._sleep = sleep

    def _complete(self, request: GenerationRequest) -> str:
        last: TransportError | None = None
        for attempt in range(1, self.max_attempts + 1):
            try:
                return self.inner._complete(request)
            except TransportError as exc:
                last = exc
                if attempt < self.max_attempts:
                    delay = min(self.base_delay_s * 2 ** (attempt - 1), self.max_delay_s)
                    logger.warning(
                        "retryable backend failure (attempt %d/%d): %s",
                        attempt,
                        self.max_attempts,
                        exc,
                    )
                    self._sleep(delay)
        raise TransportError(f"{last} [after {self.max_attempts} attempts]") from last


def with_retries(backend: Backend, max_attempts: int, **kwargs) -> Backend:
    """Wrap a backend with bounded exponential backoff on retryable errors."""
    return RetryingBackend(backend, max_attempts=max_attempts, **kwargs)
