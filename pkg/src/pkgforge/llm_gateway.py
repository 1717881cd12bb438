"""Completion gateway with record/replay fixtures.

Live mode POSTs a chat-completion request to an HTTP endpoint and, when a
fixtures directory is configured, captures the (request, response) pair
under the request tag so the run can later be replayed bit-exactly.
Replay mode answers from those fixtures alone and performs no network
activity. Request tags are content hashes, so identical prompts at the
same temperature share one fixture.
"""

from __future__ import annotations

import json
import os
import threading
import time
from dataclasses import dataclass

from .fnv import fnv1a_64_hex
from .ioutil import atomic_write_text

RETRY_BACKOFF_INITIAL_MS = 500


class GatewayError(Exception):
    """Base class for completion failures."""


class FixtureMissingError(GatewayError):
    """Replay mode found no fixture for a request tag."""

    def __init__(self, request_tag: str, fixtures_dir: str):
        self.request_tag = request_tag
        super().__init__(
            f"no fixture for request tag {request_tag} in {fixtures_dir}"
        )


class TransportError(GatewayError):
    """Connection failures and 5xx responses after all retries."""


class GatewayTimeoutError(TransportError):
    """The endpoint did not answer within timeout_ms after all retries."""


class BackendError(GatewayError):
    """Non-retryable backend rejection (4xx) or malformed response body."""


def compute_request_tag(prompt: str, temperature: float) -> str:
    """Derive the cache key for a (prompt, temperature) pair.

    The tag is the 64-bit FNV-1a hex digest of the temperature formatted
    with six decimal places, a NUL separator, then the prompt, all UTF-8.
    """
    payload = f"{temperature:.6f}\x00{prompt}".encode("utf-8")
    return fnv1a_64_hex(payload)


@dataclass(frozen=True)
class LlmRequest:
    """One completion request.

    The request tag is derived from (prompt, temperature) when not
    supplied, so equal requests always share a fixture key.
    """

    prompt: str
    temperature: float = 0.0
    max_output_tokens: int = 1024
    request_tag: str = ""

    def __post_init__(self) -> None:
        if not self.prompt:
            raise ValueError("prompt must be non-empty")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"temperature out of range: {self.temperature}")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be positive")
        if not self.request_tag:
            object.__setattr__(
                self,
                "request_tag",
                compute_request_tag(self.prompt, self.temperature),
            )


@dataclass(frozen=True)
class LlmResponse:
    text: str
    backend: str  # "live" or "replay"
    latency_ms: float
    truncated: bool = False


@dataclass
class BackendConfig:
    """Gateway settings.

    mode: "live" or "replay".
    endpoint_url: chat-completion endpoint, required in live mode.
    auth_token_env_var: env var holding a bearer token, optional.
    fixtures_dir: fixture directory; required in replay mode, enables
        capture in live mode.
    max_in_flight: cap on simultaneously outstanding live requests.
    max_retries: extra attempts after the first, transport/5xx only.
    timeout_ms: per-attempt wall clock budget.
    """

    mode: str = "replay"
    endpoint_url: str = ""
    auth_token_env_var: str = ""
    fixtures_dir: str = ""
    max_in_flight: int = 4
    max_retries: int = 2
    timeout_ms: int = 30000

    def __post_init__(self) -> None:
        if self.mode not in ("live", "replay"):
            raise ValueError(f"unknown gateway mode {self.mode!r}")
        if self.mode == "live" and not self.endpoint_url:
            raise ValueError("live mode requires endpoint_url")
        if self.mode == "replay" and not self.fixtures_dir:
            raise ValueError("replay mode requires fixtures_dir")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be non-negative")
        if self.timeout_ms < 1:
            raise ValueError("timeout_ms must be positive")


class LlmGateway:
    """Thread-safe completion front. One instance per pipeline run."""

    def __init__(self, config: BackendConfig):
        self.config = config
        self._limiter = threading.Semaphore(config.max_in_flight)

    def complete(self, request: LlmRequest) -> LlmResponse:
        if self.config.mode == "replay":
            return self._replay(request)
        with self._limiter:
            return self._live(request)

    def _fixture_path(self, request_tag: str) -> str:
        return os.path.join(self.config.fixtures_dir, f"{request_tag}.json")

    def _replay(self, request: LlmRequest) -> LlmResponse:
        started = time.perf_counter()
        path = self._fixture_path(request.request_tag)
        try:
            with open(path, encoding="utf-8") as handle:
                fixture = json.load(handle)
        except FileNotFoundError:
            raise FixtureMissingError(
                request.request_tag, self.config.fixtures_dir
            ) from None
        latency = (time.perf_counter() - started) * 1000.0
        return LlmResponse(
            text=fixture["response_text"],
            backend="replay",
            latency_ms=latency,
            truncated=bool(fixture.get("truncated", False)),
        )

    def _live(self, request: LlmRequest) -> LlmResponse:
        import requests as _requests

        headers = {"Content-Type": "application/json"}
        if self.config.auth_token_env_var:
            token = os.environ.get(self.config.auth_token_env_var, "")
            if token:
                headers["Authorization"] = f"Bearer {token}"
        body = {
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        timeout_s = self.config.timeout_ms / 1000.0
        backoff_s = RETRY_BACKOFF_INITIAL_MS / 1000.0
        attempts = self.config.max_retries + 1
        started = time.perf_counter()
        last_error: Exception | None = None
        timed_out = False
        for attempt in range(attempts):
            if attempt > 0:
                time.sleep(backoff_s)
                backoff_s *= 2
            try:
                reply = _requests.post(
                    self.config.endpoint_url,
                    json=body,
                    headers=headers,
                    timeout=timeout_s,
                )
            except _requests.Timeout as exc:
                last_error, timed_out = exc, True
                continue
            except _requests.RequestException as exc:
                last_error, timed_out = exc, False
                continue
            if reply.status_code >= 500:
                last_error = TransportError(
                    f"endpoint returned {reply.status_code}"
                )
                timed_out = False
                continue
            if reply.status_code >= 400:
                raise BackendError(
                    f"endpoint rejected request {request.request_tag}: "
                    f"{reply.status_code} {reply.text[:200]}"
                )
            latency = (time.perf_counter() - started) * 1000.0
            text, truncated = _parse_completion_body(reply.text)
            response = LlmResponse(
                text=text, backend="live", latency_ms=latency, truncated=truncated
            )
            if self.config.fixtures_dir:
                self._capture(request, response)
            return response
        if timed_out:
            raise GatewayTimeoutError(
                f"request {request.request_tag} timed out after "
                f"{attempts} attempts"
            ) from last_error
        raise TransportError(
            f"request {request.request_tag} failed after {attempts} attempts: "
            f"{last_error}"
        ) from last_error

    def _capture(self, request: LlmRequest, response: LlmResponse) -> None:
        record = {
            "request_tag": request.request_tag,
            "temperature": request.temperature,
            "max_output_tokens": request.max_output_tokens,
            "prompt": request.prompt,
            "response_text": response.text,
            "truncated": response.truncated,
        }
        atomic_write_text(
            self._fixture_path(request.request_tag),
            json.dumps(record, ensure_ascii=False, indent=2) + "\n",
        )


def _parse_completion_body(raw: str) -> tuple[str, bool]:
    """Pull the first message content out of a chat-completion reply."""
    try:
        payload = json.loads(raw)
        choice = payload["choices"][0]
        text = choice["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise BackendError(f"malformed completion body: {exc}") from exc
    if not isinstance(text, str):
        raise BackendError("completion content is not a string")
    truncated = choice.get("finish_reason") == "length"
    return text, truncated


def write_fixture(
    fixtures_dir: str,
    prompt: str,
    response_text: str,
    temperature: float = 0.0,
    max_output_tokens: int = 1024,
    truncated: bool = False,
) -> str:
    """Author a replay fixture directly; returns the request tag.

    Used to script corpora for tests and offline runs.
    """
    tag = compute_request_tag(prompt, temperature)
    record = {
        "request_tag": tag,
        "temperature": temperature,
        "max_output_tokens": max_output_tokens,
        "prompt": prompt,
        "response_text": response_text,
        "truncated": truncated,
    }
    atomic_write_text(
        os.path.join(fixtures_dir, f"{tag}.json"),
        json.dumps(record, ensure_ascii=False, indent=2) + "\n",
    )
    return tag
