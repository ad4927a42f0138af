"""Chat-completion access with retry/throttle discipline and cost accounting.

Two backends share one wire contract: a live HTTP backend speaking the
common chat-completions JSON format, and a deterministic scripted mock
used for tests and offline runs.  ``Gateway.complete`` owns the retry
policy; stages never talk to a backend directly.
"""

from __future__ import annotations

import math
import os
import random
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

from . import ndjson

API_KEY_ENV = "QUALLM_API_KEY"

# Failure taxonomy; fixed vocabulary.
THROTTLED = "throttled"
CONTENT_FILTERED = "content_filtered"
MALFORMED_OUTPUT = "malformed_output"
NETWORK = "network"
OTHER = "other"
FAILURE_CATEGORIES = (THROTTLED, CONTENT_FILTERED, MALFORMED_OUTPUT, NETWORK, OTHER)


@dataclass(frozen=True)
class CompletionRequest:
    """One chat-completion call; ``request_tag`` identifies stage + unit."""

    messages: tuple[tuple[str, str], ...]
    model_name: str
    temperature: float = 0.2
    max_output_tokens: int = 4096
    request_tag: str = ""

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("messages must be non-empty")
        if self.messages[0][0] not in ("system", "user"):
            raise ValueError("first message role must be 'system' or 'user'")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must be within [0, 2]")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be positive")

    @property
    def prompt_chars(self) -> int:
        return sum(len(text) for _, text in self.messages)


@dataclass(frozen=True)
class CompletionResult:
    text: str
    input_tokens: int
    output_tokens: int
    attempts: int

    def __post_init__(self) -> None:
        if self.attempts < 1:
            raise ValueError("attempts must be >= 1")


@dataclass(frozen=True)
class GatewayFailure:
    category: str
    attempts: int
    detail: str = ""

    def __post_init__(self) -> None:
        if self.category not in FAILURE_CATEGORIES:
            raise ValueError(f"unknown failure category {self.category!r}")


CompletionOutcome = Union[CompletionResult, GatewayFailure]


class BackendError(Exception):
    """Raised by backends; the gateway maps subclasses to failure categories."""

    category = OTHER


class ThrottledError(BackendError):
    category = THROTTLED


class ContentFilteredError(BackendError):
    category = CONTENT_FILTERED


class MalformedOutputError(BackendError):
    category = MALFORMED_OUTPUT


class NetworkError(BackendError):
    category = NETWORK


def estimate_tokens(text: str) -> int:
    """Order-correct token estimate used when no provider count is available."""
    return math.ceil(len(text) / 4)


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------


class MockBackend:
    """Scripted backend keyed by request_tag.

    The script is newline-delimited JSON with entries
    ``{request_tag, response_text, input_tokens?, output_tokens?}`` or
    ``{request_tag, failure: <category>}``.  Several entries may share a
    tag; they are consumed in order (retries within one unit are
    sequential, so consumption stays deterministic under concurrency).
    An unmatched tag yields a malformed_output failure unless
    ``default_text`` is set, in which case that canned text is returned.
    """

    def __init__(self, entries: Sequence[dict], default_text: Optional[str] = None):
        self._queues: dict[str, list[dict]] = {}
        for entry in entries:
            self._queues.setdefault(str(entry["request_tag"]), []).append(entry)
        self._cursor: dict[str, int] = {}
        self._default_text = default_text
        self._lock = threading.Lock()
        self.calls = 0

    @classmethod
    def from_script(
        cls, path: Path, default_text: Optional[str] = None
    ) -> "MockBackend":
        return cls(ndjson.read_records(path), default_text=default_text)

    def _next_entry(self, tag: str) -> Optional[dict]:
        queue = self._queues.get(tag)
        if queue is None:
            return None
        with self._lock:
            index = self._cursor.get(tag, 0)
            self._cursor[tag] = index + 1
        # Past the scripted entries, keep replaying the last one.
        return queue[min(index, len(queue) - 1)]

    def send(self, request: CompletionRequest) -> tuple[str, int, int]:
        with self._lock:
            self.calls += 1
        entry = self._next_entry(request.request_tag)
        if entry is None:
            if self._default_text is not None:
                text = self._default_text
                return text, estimate_tokens(str(request.messages)), estimate_tokens(text)
            raise MalformedOutputError(
                f"no scripted response for tag {request.request_tag!r}"
            )
        failure = entry.get("failure")
        if failure:
            exc = {
                THROTTLED: ThrottledError,
                CONTENT_FILTERED: ContentFilteredError,
                NETWORK: NetworkError,
                MALFORMED_OUTPUT: MalformedOutputError,
            }.get(failure, BackendError)
            raise exc(entry.get("detail", f"scripted {failure}"))
        text = entry["response_text"]
        input_tokens = entry.get("input_tokens")
        output_tokens = entry.get("output_tokens")
        if input_tokens is None:
            input_tokens = sum(estimate_tokens(t) for _, t in request.messages)
        if output_tokens is None:
            output_tokens = estimate_tokens(text)
        return text, int(input_tokens), int(output_tokens)


class HttpBackend:
    """Live backend for any endpoint speaking the common chat-completions format.

    The credential comes from the ``QUALLM_API_KEY`` environment variable and
    is sent both as a bearer token and as an ``api-key`` header so that the
    usual hosted variants accept it.
    """

    def __init__(self, endpoint: str, timeout: float = 120.0):
        if not endpoint:
            raise ValueError("live backend requires an endpoint URL")
        key = os.environ.get(API_KEY_ENV, "")
        if not key:
            raise ValueError(f"live backend requires the {API_KEY_ENV} env var")
        self.endpoint = endpoint
        self.timeout = timeout
        self._headers = {
            "Content-Type": "application/json",
            "Authorization": f"Bearer {key}",
            "api-key": key,
        }

    def send(self, request: CompletionRequest) -> tuple[str, int, int]:
        import requests

        payload = {
            "model": request.model_name,
            "messages": [
                {"role": role, "content": text} for role, text in request.messages
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        try:
            response = requests.post(
                self.endpoint, json=payload, headers=self._headers,
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise NetworkError(str(exc)) from exc

        if response.status_code == 429:
            raise ThrottledError(f"HTTP 429: {response.text[:200]}")
        if response.status_code >= 500:
            raise NetworkError(f"HTTP {response.status_code}")
        if response.status_code >= 400:
            body = response.text
            if "content_filter" in body or "content_policy" in body:
                raise ContentFilteredError(body[:200])
            raise BackendError(f"HTTP {response.status_code}: {body[:200]}")

        try:
            data = response.json()
            choice = data["choices"][0]
            if choice.get("finish_reason") == "content_filter":
                raise ContentFilteredError("finish_reason=content_filter")
            text = choice["message"]["content"]
            usage = data.get("usage", {})
        except ContentFilteredError:
            raise
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise MalformedOutputError(f"unexpected response shape: {exc}") from exc

        input_tokens = int(usage.get("prompt_tokens", 0)) or estimate_tokens(
            str(payload["messages"])
        )
        output_tokens = int(usage.get("completion_tokens", 0)) or estimate_tokens(text)
        return text, input_tokens, output_tokens


# ---------------------------------------------------------------------------
# Retry policy, ledger, gateway
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RetryPolicy:
    """Exponential backoff for throttle/transport errors."""

    max_attempts: int = 6
    base_delay: float = 2.0
    multiplier: float = 2.0
    jitter: float = 0.25

    def delay(self, attempt: int, rng: random.Random) -> float:
        """Delay before retry number *attempt* (1-based); nondecreasing."""
        base = self.base_delay * self.multiplier ** (attempt - 1)
        return base * rng.uniform(1.0 - self.jitter, 1.0 + self.jitter)


class TokenLedger:
    """Shared accumulator of token usage; safe under concurrent updates."""

    def __init__(self, input_rate: float = 0.01, output_rate: float = 0.03):
        if input_rate <= 0 or output_rate <= 0:
            raise ValueError("token rates must be positive")
        self.input_rate = input_rate
        self.output_rate = output_rate
        self.total_input_tokens = 0
        self.total_output_tokens = 0
        self._lock = threading.Lock()

    def add(self, input_tokens: int, output_tokens: int) -> None:
        if input_tokens < 0 or output_tokens < 0:
            raise ValueError("token counts must be non-negative")
        with self._lock:
            self.total_input_tokens += input_tokens
            self.total_output_tokens += output_tokens

    def snapshot(self) -> tuple[int, int]:
        with self._lock:
            return self.total_input_tokens, self.total_output_tokens


def record_usage(ledger: TokenLedger, result: CompletionResult) -> TokenLedger:
    """Fold one completion's token counts into the ledger."""
    ledger.add(result.input_tokens, result.output_tokens)
    return ledger


@dataclass(frozen=True)
class CostBreakdown:
    total_input_tokens: int
    total_output_tokens: int
    input_rate: float
    output_rate: float
    input_cost: float
    output_cost: float
    total_cost: float


def cost_report(ledger: TokenLedger) -> CostBreakdown:
    """Itemized cost: tokens/1000 x rate per side, summed."""
    input_cost = ledger.total_input_tokens / 1000 * ledger.input_rate
    output_cost = ledger.total_output_tokens / 1000 * ledger.output_rate
    return CostBreakdown(
        total_input_tokens=ledger.total_input_tokens,
        total_output_tokens=ledger.total_output_tokens,
        input_rate=ledger.input_rate,
        output_rate=ledger.output_rate,
        input_cost=input_cost,
        output_cost=output_cost,
        total_cost=input_cost + output_cost,
    )


class Gateway:
    """Uniform completion access: one backend, one retry policy, one ledger.

    Throttle and transport errors are retried with exponential backoff up
    to the policy's attempt cap; content-policy rejections are never
    retried (retrying cannot succeed and wastes budget).  Every outcome is
    appended to the run log when one is configured.
    """

    def __init__(
        self,
        backend,
        retry: RetryPolicy = RetryPolicy(),
        ledger: Optional[TokenLedger] = None,
        run_log_path: Optional[Path] = None,
        sleep: Callable[[float], None] = time.sleep,
        seed: Optional[int] = None,
        model_name: str = "default",
        temperature: float = 0.2,
        max_output_tokens: int = 4096,
    ):
        self.backend = backend
        self.retry = retry
        self.model_name = model_name
        self.temperature = temperature
        self.max_output_tokens = max_output_tokens
        self.ledger = ledger if ledger is not None else TokenLedger()
        self.run_log_path = run_log_path
        self._sleep = sleep
        self._rng = random.Random(seed)
        self._log_lock = threading.Lock()

    def _log(self, tag: str, outcome: str, attempts: int, input_tokens: int,
             output_tokens: int) -> None:
        if self.run_log_path is None:
            return
        with self._log_lock:
            ndjson.append_record(
                self.run_log_path,
                {
                    "request_tag": tag,
                    "outcome": outcome,
                    "attempts": attempts,
                    "input_tokens": input_tokens,
                    "output_tokens": output_tokens,
                },
            )

    def request(self, prompt: str, tag: str) -> CompletionRequest:
        """Build a single-user-message request with this gateway's defaults."""
        return CompletionRequest(
            messages=(("user", prompt),),
            model_name=self.model_name,
            temperature=self.temperature,
            max_output_tokens=self.max_output_tokens,
            request_tag=tag,
        )

    def complete(self, request: CompletionRequest) -> CompletionOutcome:
        attempts = 0
        last_error: Optional[BackendError] = None
        while attempts < self.retry.max_attempts:
            attempts += 1
            try:
                text, input_tokens, output_tokens = self.backend.send(request)
            except (ThrottledError, NetworkError) as exc:
                last_error = exc
                if attempts < self.retry.max_attempts:
                    self._sleep(self.retry.delay(attempts, self._rng))
                continue
            except BackendError as exc:
                self._log(request.request_tag, exc.category, attempts, 0, 0)
                return GatewayFailure(
                    category=exc.category, attempts=attempts, detail=str(exc)
                )
            result = CompletionResult(
                text=text,
                input_tokens=input_tokens,
                output_tokens=output_tokens,
                attempts=attempts,
            )
            record_usage(self.ledger, result)
            self._log(request.request_tag, "ok", attempts, input_tokens, output_tokens)
            return result

        assert last_error is not None
        self._log(request.request_tag, last_error.category, attempts, 0, 0)
        return GatewayFailure(
            category=last_error.category, attempts=attempts, detail=str(last_error)
        )
