"""Trace data model: CoT token streams with top-K logprobs, answer positions,
per-token labels, and the binary feature-sidecar format.

File formats are contracts: the JSONL trace/labeled schemas and the OPTX
sidecar round-trip byte-identically, so serialization is canonical (fixed key
order, compact separators, shortest-round-trip floats).
"""

from __future__ import annotations

import json
import math
import os
import struct
from bisect import bisect_right
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagic,
    DataError,
    DuplicateTraceId,
    EmptyThinkRegion,
    IndexOutOfRange,
    MissingFile,
    NonFiniteValue,
    RowCountMismatch,
    SchemaError,
    UnverifiedAnswer,
    VersionMismatch,
)

THINK_OPEN = "<think>"
THINK_CLOSE = "</think>"

OPTX_MAGIC = b"OPTX"
OPTX_VERSION = 1


@dataclass
class TopKEntry:
    token_id: int
    logprob: float  # nats, <= 0


@dataclass
class TokenRecord:
    index: int
    token_id: int
    token_text: str
    chosen_logprob: float
    top_k: list[TopKEntry] = field(default_factory=list)


@dataclass
class Trace:
    trace_id: str
    prompt: str
    source: str
    model: str
    k: int
    solution_text: str
    final_answer: str | None
    cot_tokens: list[TokenRecord]

    @property
    def m(self) -> int:
        return len(self.cot_tokens)

    def cot_text(self) -> str:
        return "".join(t.token_text for t in self.cot_tokens)


@dataclass
class AnswerPosition:
    trace_id: str
    span_text: str
    char_start: int
    char_end: int
    token_index: int
    verified: bool
    retries_used: int


@dataclass
class LabeledTrace:
    trace: Trace
    answer: AnswerPosition
    labels: list[int]
    loss_mask: list[int]


@dataclass
class FeatureMatrix:
    trace_id: str
    rows: int
    dim: int
    values: np.ndarray  # float32, shape (rows, dim)


# ---------------------------------------------------------------------------
# JSONL serialization
# ---------------------------------------------------------------------------

def _require(cond: bool, line: int, fieldname: str, message: str):
    if not cond:
        raise SchemaError(line, fieldname, message)


def _parse_token(obj, line: int, k: int, expect_index: int) -> TokenRecord:
    _require(isinstance(obj, dict), line, "cot_tokens", "token entry must be an object")
    for key in ("i", "id", "text", "lp", "topk"):
        _require(key in obj, line, key, "missing token key")
    _require(obj["i"] == expect_index, line, "i",
             f"expected contiguous index {expect_index}, got {obj['i']}")
    _require(isinstance(obj["id"], int), line, "id", "token id must be an integer")
    _require(isinstance(obj["text"], str), line, "text", "token text must be a string")
    _require(isinstance(obj["lp"], (int, float)), line, "lp", "logprob must be a number")
    topk_raw = obj["topk"]
    _require(isinstance(topk_raw, list), line, "topk", "topk must be an array")
    _require(len(topk_raw) == k, line, "top_k",
             f"expected {k} entries, found {len(topk_raw)}")
    top_k = []
    prev = math.inf
    for pair in topk_raw:
        _require(isinstance(pair, list) and len(pair) == 2, line, "topk",
                 "each topk entry must be an [id, lp] pair")
        tid, lp = pair
        _require(isinstance(tid, int), line, "topk", "topk id must be an integer")
        _require(isinstance(lp, (int, float)), line, "topk", "topk lp must be a number")
        _require(lp <= 0.0, line, "topk", "logprob must be <= 0")
        _require(lp <= prev, line, "topk", "topk must be sorted by logprob descending")
        prev = lp
        top_k.append(TopKEntry(token_id=tid, logprob=float(lp)))
    return TokenRecord(
        index=expect_index,
        token_id=obj["id"],
        token_text=obj["text"],
        chosen_logprob=float(obj["lp"]),
        top_k=top_k,
    )


def _parse_trace(obj, line: int) -> Trace:
    _require(isinstance(obj, dict), line, "record", "record must be an object")
    for key in ("trace_id", "prompt", "source", "model", "k",
                "solution_text", "final_answer", "cot_tokens"):
        _require(key in obj, line, key, "missing key")
    _require(isinstance(obj["trace_id"], str) and obj["trace_id"], line,
             "trace_id", "must be a non-empty string")
    _require(isinstance(obj["k"], int) and obj["k"] >= 1, line, "k", "must be an integer >= 1")
    fa = obj["final_answer"]
    _require(fa is None or isinstance(fa, str), line, "final_answer",
             "must be a string or null")
    raw_tokens = obj["cot_tokens"]
    _require(isinstance(raw_tokens, list) and len(raw_tokens) >= 1, line,
             "cot_tokens", "must be a non-empty array")
    tokens = [_parse_token(t, line, obj["k"], i) for i, t in enumerate(raw_tokens)]
    return Trace(
        trace_id=obj["trace_id"],
        prompt=obj["prompt"],
        source=obj["source"],
        model=obj["model"],
        k=obj["k"],
        solution_text=obj["solution_text"],
        final_answer=fa,
        cot_tokens=tokens,
    )


def _token_to_obj(t: TokenRecord) -> dict:
    return {
        "i": t.index,
        "id": t.token_id,
        "text": t.token_text,
        "lp": t.chosen_logprob,
        "topk": [[e.token_id, e.logprob] for e in t.top_k],
    }


def _trace_to_obj(trace: Trace) -> dict:
    return {
        "trace_id": trace.trace_id,
        "prompt": trace.prompt,
        "source": trace.source,
        "model": trace.model,
        "k": trace.k,
        "solution_text": trace.solution_text,
        "final_answer": trace.final_answer,
        "cot_tokens": [_token_to_obj(t) for t in trace.cot_tokens],
    }


def _dumps(obj: dict) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def load_traces(path: str | os.PathLike) -> list[Trace]:
    """Parse a JSONL trace file; aborts with a 1-based line number on any
    schema violation."""
    if not os.path.exists(path):
        raise MissingFile(str(path))
    traces: list[Trace] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise SchemaError(line_no, "json", str(exc)) from exc
            trace = _parse_trace(obj, line_no)
            if trace.trace_id in seen:
                raise DuplicateTraceId(f"line {line_no}: {trace.trace_id}")
            seen.add(trace.trace_id)
            traces.append(trace)
    return traces


def save_traces(traces: list[Trace], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for trace in traces:
            fh.write(_dumps(_trace_to_obj(trace)) + "\n")


def _answer_to_obj(a: AnswerPosition) -> dict:
    return {
        "span_text": a.span_text,
        "char_start": a.char_start,
        "char_end": a.char_end,
        "token_index": a.token_index,
        "verified": a.verified,
        "retries_used": a.retries_used,
    }


def _parse_answer(obj, line: int, trace_id: str, m: int) -> AnswerPosition:
    _require(isinstance(obj, dict), line, "answer", "must be an object")
    for key in ("span_text", "char_start", "char_end", "token_index",
                "verified", "retries_used"):
        _require(key in obj, line, f"answer.{key}", "missing key")
    _require(obj["char_start"] < obj["char_end"], line, "answer.char_end",
             "char_start must be < char_end")
    _require(0 <= obj["token_index"] < m, line, "answer.token_index",
             f"must be in [0, {m})")
    _require(obj["retries_used"] >= 0, line, "answer.retries_used", "must be >= 0")
    return AnswerPosition(
        trace_id=trace_id,
        span_text=obj["span_text"],
        char_start=obj["char_start"],
        char_end=obj["char_end"],
        token_index=obj["token_index"],
        verified=bool(obj["verified"]),
        retries_used=obj["retries_used"],
    )


def load_labeled(path: str | os.PathLike) -> list[LabeledTrace]:
    if not os.path.exists(path):
        raise MissingFile(str(path))
    out: list[LabeledTrace] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise SchemaError(line_no, "json", str(exc)) from exc
            trace = _parse_trace(obj, line_no)
            if trace.trace_id in seen:
                raise DuplicateTraceId(f"line {line_no}: {trace.trace_id}")
            seen.add(trace.trace_id)
            for key in ("answer", "labels", "loss_mask"):
                _require(key in obj, line_no, key, "missing key")
            answer = _parse_answer(obj["answer"], line_no, trace.trace_id, trace.m)
            _require(answer.verified, line_no, "answer.verified",
                     "only verified answers are admitted")
            labels = obj["labels"]
            mask = obj["loss_mask"]
            for name, arr in (("labels", labels), ("loss_mask", mask)):
                _require(isinstance(arr, list) and len(arr) == trace.m, line_no,
                         name, f"must be an array of length {trace.m}")
                _require(all(v in (0, 1) for v in arr), line_no, name,
                         "entries must be 0 or 1")
            expected = [1 if i >= answer.token_index else 0 for i in range(trace.m)]
            _require(labels == expected, line_no, "labels",
                     "labels must be 1 exactly from token_index onward")
            _require(sum(mask) >= 1, line_no, "loss_mask",
                     "mask must cover at least one position")
            out.append(LabeledTrace(trace=trace, answer=answer,
                                    labels=labels, loss_mask=mask))
    return out


def save_labeled(labeled: list[LabeledTrace], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for lt in labeled:
            obj = _trace_to_obj(lt.trace)
            obj["answer"] = _answer_to_obj(lt.answer)
            obj["labels"] = lt.labels
            obj["loss_mask"] = lt.loss_mask
            fh.write(_dumps(obj) + "\n")


# ---------------------------------------------------------------------------
# Labels and the think region
# ---------------------------------------------------------------------------

def think_region(trace: Trace) -> tuple[int, int]:
    """Token-index bounds [start, end) strictly inside the think markers.

    Markers absent from the stored tokens mean the whole CoT is think
    content (models whose serving template strips them).
    """
    start = 0
    end = trace.m
    for i, tok in enumerate(trace.cot_tokens):
        if tok.token_text.strip() == THINK_OPEN:
            start = i + 1
            break
    for i in range(start, trace.m):
        if trace.cot_tokens[i].token_text.strip() == THINK_CLOSE:
            end = i
            break
    return start, end


def assign_labels(trace: Trace, answer: AnswerPosition) -> LabeledTrace:
    """Per-token binary labels: 1 from the answer-arrival index onward.

    The arrival index itself is labeled 1 (the exit may fire on the token
    that completes the answer). The loss mask restricts training to
    positions strictly inside the think region.
    """
    if not answer.verified:
        raise UnverifiedAnswer(answer.trace_id)
    if not 0 <= answer.token_index < trace.m:
        raise IndexOutOfRange(
            f"token_index {answer.token_index} outside [0, {trace.m})")
    labels = [1 if i >= answer.token_index else 0 for i in range(trace.m)]
    start, end = think_region(trace)
    mask = [1 if start <= i < end else 0 for i in range(trace.m)]
    if sum(mask) < 1:
        raise EmptyThinkRegion(trace.trace_id)
    return LabeledTrace(trace=trace, answer=answer, labels=labels, loss_mask=mask)


def char_offsets(cot_tokens: list[TokenRecord]) -> list[int]:
    """Cumulative character end-offsets of the decoded token texts."""
    ends = []
    total = 0
    for tok in cot_tokens:
        total += len(tok.token_text)
        ends.append(total)
    return ends


def char_to_token(char_pos: int, cot_tokens: list[TokenRecord]) -> int:
    """Index of the token whose [start, end) character interval contains
    char_pos; a position equal to the total decoded length clamps to the
    last token."""
    if not cot_tokens:
        raise IndexOutOfRange("empty token list")
    ends = char_offsets(cot_tokens)
    total = ends[-1]
    if char_pos < 0 or char_pos > total:
        raise IndexOutOfRange(f"char {char_pos} outside [0, {total}]")
    if char_pos == total:
        return len(cot_tokens) - 1
    return bisect_right(ends, char_pos)


# ---------------------------------------------------------------------------
# Feature sidecar (OPTX)
# ---------------------------------------------------------------------------

def sidecar_path(out_dir: str | os.PathLike, trace_id: str) -> str:
    return os.path.join(out_dir, f"{trace_id}.optx")


def write_sidecar(path: str | os.PathLike, values: np.ndarray) -> None:
    arr = np.asarray(values, dtype="<f4")
    if arr.ndim != 2:
        raise DataError(f"feature matrix must be 2-D, got {arr.ndim}-D")
    rows, dim = arr.shape
    with open(path, "wb") as fh:
        fh.write(OPTX_MAGIC)
        fh.write(struct.pack("<III", OPTX_VERSION, rows, dim))
        fh.write(arr.tobytes(order="C"))


def read_sidecar(path: str | os.PathLike) -> FeatureMatrix:
    if not os.path.exists(path):
        raise MissingFile(str(path))
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != OPTX_MAGIC:
            raise BadMagic(f"{path}: got {magic!r}")
        header = fh.read(12)
        if len(header) != 12:
            raise VersionMismatch(f"{path}: truncated header")
        version, rows, dim = struct.unpack("<III", header)
        if version != OPTX_VERSION:
            raise VersionMismatch(f"{path}: version {version}")
        payload = fh.read()
    expected = rows * dim * 4
    if len(payload) != expected:
        raise RowCountMismatch(rows, len(payload) // max(dim * 4, 1))
    values = np.frombuffer(payload, dtype="<f4").reshape(rows, dim).copy()
    bad = ~np.isfinite(values)
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise NonFiniteValue(int(r), int(c))
    trace_id = os.path.splitext(os.path.basename(str(path)))[0]
    return FeatureMatrix(trace_id=trace_id, rows=rows, dim=dim, values=values)


def attach_features(trace: Trace, sidecar: str | os.PathLike) -> FeatureMatrix:
    """Load the trace's sidecar, rejecting a row count that disagrees with M."""
    fm = read_sidecar(sidecar)
    if fm.rows != trace.m:
        raise RowCountMismatch(trace.m, fm.rows)
    return fm
