"""Client for OpenAI-compatible chat-completion endpoints.

Only the subset the pipeline needs is spoken: POST /v1/chat/completions with
model, messages, max_tokens, temperature, logprobs, top_logprobs, stream.
Transient transport failures are retried with exponential backoff and full
jitter; model output, however odd, is never retried.
"""

from __future__ import annotations

import hashlib
import json
import os
import random
import threading
import time
from dataclasses import dataclass, field
from typing import Callable

import requests

from .errors import MalformedResponse, TransportError, Timeout, UsageError
from .traces import TokenRecord, TopKEntry

API_KEY_ENV = "OPTEXIT_API_KEY"
ROLE_HEADER = "x-optexit-role"
TRUNCATION_HEADER = "x-optexit-truncation-index"

ROLE_TAGS = ("generate", "extract", "identify", "verify", "solve_after_truncation")


@dataclass
class LlmRequest:
    role_tag: str = "generate"
    system_prompt: str = ""
    user_prompt: str = ""
    max_tokens: int = 2048
    temperature: float = 0.0
    want_logprobs: bool = False
    top_logprobs: int = 20

    def __post_init__(self):
        if self.role_tag not in ROLE_TAGS:
            raise UsageError(f"unknown role_tag {self.role_tag!r}")
        if self.temperature < 0:
            raise UsageError("temperature must be >= 0")
        if self.want_logprobs and self.top_logprobs < 1:
            raise UsageError("top_logprobs must be >= 1 when logprobs are requested")

    def messages(self) -> list[dict]:
        msgs = []
        if self.system_prompt:
            msgs.append({"role": "system", "content": self.system_prompt})
        msgs.append({"role": "user", "content": self.user_prompt})
        return msgs


@dataclass
class Completion:
    text: str
    tokens: list[TokenRecord] = field(default_factory=list)
    finish_reason: str = "stop"  # stop | length | aborted


def hash_messages(messages: list[dict]) -> str:
    """Canonical digest of a message list; the mock server keys scripts on it."""
    joined = "\n".join(f"{m.get('role', '')}:{m.get('content', '')}" for m in messages)
    return hashlib.sha256(joined.encode("utf-8")).hexdigest()


def _parse_logprob_entry(entry: dict, index: int) -> TokenRecord:
    top = [
        TopKEntry(token_id=int(t.get("token_id", -1)), logprob=float(t["logprob"]))
        for t in entry.get("top_logprobs", [])
    ]
    return TokenRecord(
        index=index,
        token_id=int(entry.get("token_id", -1)),
        token_text=entry.get("token", ""),
        chosen_logprob=float(entry["logprob"]),
        top_k=top,
    )


class LlmClient:
    """Thread-safe client; concurrent calls are bounded by max_inflight."""

    def __init__(
        self,
        endpoint: str,
        model: str = "default",
        api_key: str | None = None,
        max_retries: int = 3,
        backoff_base: float = 0.25,
        backoff_factor: float = 2.0,
        timeout: float = 120.0,
        max_inflight: int = 8,
        rng: random.Random | None = None,
        sleeper: Callable[[float], None] = time.sleep,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self.backoff_factor = backoff_factor
        self.timeout = timeout
        self.max_inflight = max_inflight
        self._gate = threading.Semaphore(max_inflight)
        self._rng = rng or random.Random()
        self._sleep = sleeper
        self._session = requests.Session()

    # -- request plumbing --

    def _headers(self, request: LlmRequest, extra: dict | None) -> dict:
        headers = {"content-type": "application/json", ROLE_HEADER: request.role_tag}
        if self.api_key:
            headers["authorization"] = f"Bearer {self.api_key}"
        if extra:
            headers.update(extra)
        return headers

    def _body(self, request: LlmRequest, stream: bool) -> dict:
        body = {
            "model": self.model,
            "messages": request.messages(),
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
            "logprobs": request.want_logprobs,
            "stream": stream,
        }
        if request.want_logprobs:
            body["top_logprobs"] = request.top_logprobs
        return body

    def _post(self, request: LlmRequest, stream: bool, extra_headers: dict | None):
        url = f"{self.endpoint}/v1/chat/completions"
        payload = json.dumps(self._body(request, stream)).encode("utf-8")
        headers = self._headers(request, extra_headers)
        last_exc: Exception | None = None
        for attempt in range(self.max_retries + 1):
            try:
                resp = self._session.post(
                    url, data=payload, headers=headers,
                    timeout=self.timeout, stream=stream,
                )
            except requests.Timeout as exc:
                last_exc = Timeout(str(exc))
            except requests.RequestException as exc:
                last_exc = TransportError(str(exc))
            else:
                if resp.status_code >= 500:
                    last_exc = TransportError(
                        f"server error {resp.status_code}", status=resp.status_code)
                    resp.close()
                elif resp.status_code >= 400:
                    body = resp.text[:200]
                    resp.close()
                    raise TransportError(
                        f"request rejected ({resp.status_code}): {body}",
                        status=resp.status_code)
                else:
                    return resp
            if attempt < self.max_retries:
                cap = self.backoff_base * (self.backoff_factor ** attempt)
                self._sleep(self._rng.uniform(0.0, cap))
        raise last_exc  # type: ignore[misc]

    # -- public API --

    def complete(self, request: LlmRequest,
                 extra_headers: dict | None = None) -> Completion:
        with self._gate:
            resp = self._post(request, stream=False, extra_headers=extra_headers)
            try:
                data = resp.json()
            except ValueError as exc:
                raise MalformedResponse(f"response is not JSON: {exc}") from exc
            finally:
                resp.close()
        try:
            choice = data["choices"][0]
            text = choice["message"]["content"] or ""
            finish = choice.get("finish_reason") or "stop"
        except (KeyError, IndexError, TypeError) as exc:
            raise MalformedResponse(f"unexpected response shape: {exc}") from exc
        tokens: list[TokenRecord] = []
        logprobs = choice.get("logprobs")
        if request.want_logprobs:
            if not logprobs or not logprobs.get("content"):
                raise MalformedResponse("logprobs requested but absent")
            tokens = [_parse_logprob_entry(e, i)
                      for i, e in enumerate(logprobs["content"])]
        return Completion(text=text, tokens=tokens, finish_reason=finish)

    def stream(self, request: LlmRequest,
               on_token: Callable[[TokenRecord], bool | None],
               extra_headers: dict | None = None) -> Completion:
        """Incremental delivery; the consumer returns False to abort.

        The aggregated Completion holds exactly the delivered tokens.
        """
        with self._gate:
            resp = self._post(request, stream=True, extra_headers=extra_headers)
            tokens: list[TokenRecord] = []
            pieces: list[str] = []
            finish = "stop"
            aborted = False
            try:
                for raw in resp.iter_lines(decode_unicode=True):
                    if not raw or not raw.startswith("data:"):
                        continue
                    payload = raw[len("data:"):].strip()
                    if payload == "[DONE]":
                        break
                    try:
                        chunk = json.loads(payload)
                        choice = chunk["choices"][0]
                    except (ValueError, KeyError, IndexError) as exc:
                        raise MalformedResponse(f"bad stream chunk: {exc}") from exc
                    if choice.get("finish_reason"):
                        finish = choice["finish_reason"]
                    delta = choice.get("delta") or {}
                    content = delta.get("content")
                    if content is None:
                        continue
                    record = None
                    lp = choice.get("logprobs")
                    if lp and lp.get("content"):
                        record = _parse_logprob_entry(lp["content"][0], len(tokens))
                        record.token_text = record.token_text or content
                    else:
                        record = TokenRecord(index=len(tokens), token_id=-1,
                                             token_text=content,
                                             chosen_logprob=0.0, top_k=[])
                    pieces.append(record.token_text)
                    tokens.append(record)
                    if on_token(record) is False:
                        aborted = True
                        break
            finally:
                resp.close()
        if aborted:
            finish = "aborted"
        return Completion(text="".join(pieces), tokens=tokens, finish_reason=finish)
