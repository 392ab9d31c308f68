"""Deterministic scripted mock of the chat-completions wire subset.

Responses are a pure function of the request bytes and the loaded script, so
any pipeline stage can be exercised offline and byte-reproducibly. Requests
are matched per role tag either on an exact digest of the message list or,
for truncated-CoT continuations, on the truncation-index sentinel header:
the scripted answer is served iff the carried index reaches the rule's
threshold, a deliberately monotone oracle. A truncation rule may scope
itself to one problem with `prompt_contains`, letting multi-trace corpora
script one rule per trace.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import re
import socket
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .errors import MissingFile, PortInUse, SchemaError, ScriptAmbiguity
from .gateway import ROLE_HEADER, TRUNCATION_HEADER, ROLE_TAGS, hash_messages

DEFAULT_MISS_TEXT = "I have not settled on an answer yet. \\boxed{}"


@dataclass
class ScriptEntry:
    role_tag: str
    prompt_sha256: str | None = None
    answer_from_index: int | None = None
    prompt_contains: str | None = None
    response_text: str = ""
    response_tokens: list[dict] | None = None
    miss_text: str = DEFAULT_MISS_TEXT


@dataclass
class MockScript:
    entries: list[ScriptEntry] = field(default_factory=list)

    def __post_init__(self):
        self._check_ambiguity()

    def _check_ambiguity(self):
        seen_hashes: set[tuple[str, str]] = set()
        seen_trunc: set[tuple[str, str]] = set()
        for e in self.entries:
            if e.prompt_sha256 is not None:
                key = (e.role_tag, e.prompt_sha256)
                if key in seen_hashes:
                    raise ScriptAmbiguity(
                        f"two entries match role {e.role_tag!r} "
                        f"prompt digest {e.prompt_sha256[:12]}…")
                seen_hashes.add(key)
            else:
                scope = (e.role_tag, e.prompt_contains or "")
                if scope in seen_trunc:
                    raise ScriptAmbiguity(
                        f"two truncation rules for role {e.role_tag!r} share "
                        f"scope {e.prompt_contains!r}")
                seen_trunc.add(scope)

    def find(self, role: str, digest: str, trunc_index: int | None,
             user_text: str = "") -> ScriptEntry | None:
        """First entry matching the request, in declared order."""
        for e in self.entries:
            if e.role_tag != role:
                continue
            if e.prompt_sha256 is not None:
                if e.prompt_sha256 == digest:
                    return e
            elif trunc_index is not None:
                if e.prompt_contains is None or e.prompt_contains in user_text:
                    return e
        return None


def _parse_entry(obj: dict, line: int) -> ScriptEntry:
    if not isinstance(obj, dict):
        raise SchemaError(line, "record", "entry must be an object")
    role = obj.get("role_tag")
    if role not in ROLE_TAGS:
        raise SchemaError(line, "role_tag", f"unknown role {role!r}")
    match = obj.get("match")
    if not isinstance(match, dict) or not match:
        raise SchemaError(line, "match", "must be a non-empty object")
    sha = match.get("prompt_sha256")
    afi = match.get("answer_from_index")
    contains = match.get("prompt_contains")
    known = {"prompt_sha256", "answer_from_index", "prompt_contains"}
    if set(match) - known:
        raise SchemaError(line, "match", f"unknown keys {set(match) - known}")
    if (sha is None) == (afi is None):
        raise SchemaError(line, "match",
                          "need exactly one of prompt_sha256 or answer_from_index")
    if afi is not None and (not isinstance(afi, int) or afi < 0):
        raise SchemaError(line, "match", "answer_from_index must be an int >= 0")
    if contains is not None and sha is not None:
        raise SchemaError(line, "match",
                          "prompt_contains only scopes truncation rules")
    text = obj.get("response_text")
    if not isinstance(text, str):
        raise SchemaError(line, "response_text", "must be a string")
    tokens = obj.get("response_tokens")
    if tokens is not None:
        if not isinstance(tokens, list) or not tokens:
            raise SchemaError(line, "response_tokens", "must be a non-empty array")
        for t in tokens:
            if not isinstance(t, dict) or "text" not in t:
                raise SchemaError(line, "response_tokens",
                                  "each token needs at least a text key")
        joined = "".join(t["text"] for t in tokens)
        if joined != text:
            raise SchemaError(line, "response_tokens",
                              "token texts must concatenate to response_text")
    return ScriptEntry(
        role_tag=role,
        prompt_sha256=sha,
        answer_from_index=afi,
        prompt_contains=contains,
        response_text=text,
        response_tokens=tokens,
        miss_text=obj.get("miss_text", DEFAULT_MISS_TEXT),
    )


def load_script(path: str | os.PathLike) -> MockScript:
    if not os.path.exists(path):
        raise MissingFile(str(path))
    entries = []
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise SchemaError(line_no, "json", str(exc)) from exc
            entries.append(_parse_entry(obj, line_no))
    return MockScript(entries=entries)


def save_script(script: MockScript, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in script.entries:
            if e.prompt_sha256 is not None:
                match = {"prompt_sha256": e.prompt_sha256}
            else:
                match = {"answer_from_index": e.answer_from_index}
                if e.prompt_contains is not None:
                    match["prompt_contains"] = e.prompt_contains
            obj = {"role_tag": e.role_tag, "match": match,
                   "response_text": e.response_text}
            if e.response_tokens is not None:
                obj["response_tokens"] = e.response_tokens
            if e.miss_text != DEFAULT_MISS_TEXT:
                obj["miss_text"] = e.miss_text
            fh.write(json.dumps(obj, ensure_ascii=False, separators=(",", ":")) + "\n")


def _synth_tokens(text: str, k: int) -> list[dict]:
    """Deterministic token records for scripts that only give text."""
    pieces = re.findall(r"\S+\s*", text) or [text]
    lp_top = math.log(0.9)
    lp_rest = math.log(0.1 / max(k - 1, 1)) if k > 1 else lp_top
    out = []
    for i, piece in enumerate(pieces):
        topk = [[i, lp_top]] + [[1_000_000 + r, lp_rest] for r in range(k - 1)]
        out.append({"text": piece, "id": i, "lp": lp_top, "topk": topk})
    return out


def _token_payload(tok: dict, k: int) -> dict:
    topk = tok.get("topk") or [[tok.get("id", -1), tok.get("lp", 0.0)]]
    return {
        "token": tok["text"],
        "token_id": tok.get("id", -1),
        "logprob": tok.get("lp", 0.0),
        "top_logprobs": [
            {"token_id": tid, "token": "", "logprob": lp} for tid, lp in topk[:k]
        ],
    }


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "optexit-mock/1"

    def log_message(self, fmt, *args):
        pass

    def do_POST(self):
        if self.path != "/v1/chat/completions":
            self._send_json(404, {"error": "unknown path"})
            return
        length = int(self.headers.get("content-length", 0))
        raw = self.rfile.read(length)
        try:
            body = json.loads(raw)
            messages = body["messages"]
        except (ValueError, KeyError):
            self._send_json(400, {"error": "malformed body"})
            return
        role = self.headers.get(ROLE_HEADER, "generate")
        trunc_raw = self.headers.get(TRUNCATION_HEADER)
        trunc = int(trunc_raw) if trunc_raw is not None else None
        digest = hash_messages(messages)
        user_text = "\n".join(m.get("content", "") for m in messages
                              if isinstance(m, dict))
        entry = self.server.script.find(  # type: ignore[attr-defined]
            role, digest, trunc, user_text)
        if entry is None:
            self._send_json(404, {"error": f"no script entry for role {role!r}"})
            return

        hit = True
        if entry.answer_from_index is not None:
            hit = trunc is not None and trunc >= entry.answer_from_index
        text = entry.response_text if hit else entry.miss_text
        tokens = entry.response_tokens if hit else None

        want_logprobs = bool(body.get("logprobs"))
        top_k = int(body.get("top_logprobs", 20) or 20)
        if want_logprobs and tokens is None:
            tokens = _synth_tokens(text, top_k)

        rid = "mock-" + hashlib.sha256(
            raw + role.encode() + str(trunc).encode()).hexdigest()[:16]
        if body.get("stream"):
            self._send_stream(rid, body.get("model", "mock"), text, tokens,
                              want_logprobs, top_k)
        else:
            self._send_completion(rid, body.get("model", "mock"), text, tokens,
                                  want_logprobs, top_k)

    # -- response shapes --

    def _send_json(self, status: int, obj: dict):
        payload = json.dumps(obj, separators=(",", ":")).encode("utf-8")
        self.send_response(status)
        self.send_header("content-type", "application/json")
        self.send_header("content-length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def _send_completion(self, rid, model, text, tokens, want_logprobs, top_k):
        choice = {
            "index": 0,
            "message": {"role": "assistant", "content": text},
            "finish_reason": "stop",
        }
        if want_logprobs:
            choice["logprobs"] = {
                "content": [_token_payload(t, top_k) for t in tokens]
            }
        self._send_json(200, {
            "id": rid, "object": "chat.completion", "created": 0,
            "model": model, "choices": [choice],
        })

    def _send_stream(self, rid, model, text, tokens, want_logprobs, top_k):
        self.send_response(200)
        self.send_header("content-type", "text/event-stream")
        self.send_header("cache-control", "no-cache")
        self.send_header("connection", "close")
        self.end_headers()
        if tokens is None:
            tokens = _synth_tokens(text, top_k)
        try:
            for i, tok in enumerate(tokens):
                choice = {
                    "index": 0,
                    "delta": {"content": tok["text"]},
                    "finish_reason": "stop" if i == len(tokens) - 1 else None,
                }
                if want_logprobs:
                    choice["logprobs"] = {"content": [_token_payload(tok, top_k)]}
                chunk = {"id": rid, "object": "chat.completion.chunk",
                         "created": 0, "model": model, "choices": [choice]}
                payload = json.dumps(chunk, separators=(",", ":"))
                self.wfile.write(f"data: {payload}\n\n".encode("utf-8"))
                self.wfile.flush()
            self.wfile.write(b"data: [DONE]\n\n")
            self.wfile.flush()
        except (BrokenPipeError, ConnectionResetError):
            pass  # consumer aborted mid-stream; nothing to clean up


class MockServerHandle:
    def __init__(self, server: ThreadingHTTPServer, thread: threading.Thread):
        self._server = server
        self._thread = thread
        self.host, self.port = server.server_address[:2]
        self.url = f"http://{self.host}:{self.port}"

    def stop(self):
        self._server.shutdown()
        self._server.server_close()
        self._thread.join(timeout=5)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


def mock_serve(script: MockScript, port: int = 0,
               host: str = "127.0.0.1") -> MockServerHandle:
    """Start the scripted server on a background thread; port 0 picks a free one."""
    try:
        server = ThreadingHTTPServer((host, port), _Handler)
    except OSError as exc:
        if exc.errno == getattr(socket.errno, "EADDRINUSE", 98) or "in use" in str(exc):
            raise PortInUse(f"port {port}") from exc
        raise
    server.daemon_threads = True
    server.script = script  # type: ignore[attr-defined]
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return MockServerHandle(server, thread)
