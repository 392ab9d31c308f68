"""Writers for the two file formats the main toolkit consumes, plus a
tolerant reader for input traces.

The OPTX sidecar is bit-exact: magic, three little-endian u32 header fields
(version, rows, dim), then row-major float32 values. Trace files are JSONL
with a fixed key order; input traces only need ids and texts since logprobs
are recomputed here.
"""

from __future__ import annotations

import errno
import json
import os
from dataclasses import dataclass, field

import numpy as np

OPTX_MAGIC = b"OPTX"
OPTX_VERSION = 1


class ExtractorError(Exception):
    pass


class ModelLoad(ExtractorError):
    pass


class TokenizationMismatch(ExtractorError):
    def __init__(self, trace_id: str, index: int):
        super().__init__(f"{trace_id}: token id mismatch at index {index}")
        self.trace_id = trace_id
        self.index = index


class DiskFull(ExtractorError):
    pass


class InputError(ExtractorError):
    pass


@dataclass
class InputTrace:
    trace_id: str
    prompt: str
    source: str = "extracted"
    model: str = ""
    solution_text: str = ""
    final_answer: str | None = None
    token_ids: list[int] = field(default_factory=list)
    token_texts: list[str] = field(default_factory=list)


def read_input_traces(path: str | os.PathLike) -> list[InputTrace]:
    """Input traces need trace_id, prompt, and cot_tokens with id and text;
    any stored logprobs are ignored because this tool recomputes them."""
    if not os.path.exists(path):
        raise InputError(f"missing file: {path}")
    out = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise InputError(f"line {line_no}: not JSON ({exc})") from exc
            try:
                tid = obj["trace_id"]
                tokens = obj["cot_tokens"]
                ids = [t["id"] for t in tokens]
                texts = [t["text"] for t in tokens]
            except (KeyError, TypeError) as exc:
                raise InputError(f"line {line_no}: missing key {exc}") from exc
            if tid in seen:
                raise InputError(f"line {line_no}: duplicate trace_id {tid!r}")
            seen.add(tid)
            out.append(InputTrace(
                trace_id=tid, prompt=obj.get("prompt", ""),
                source=obj.get("source", "extracted"),
                model=obj.get("model", ""),
                solution_text=obj.get("solution_text", ""),
                final_answer=obj.get("final_answer"),
                token_ids=ids, token_texts=texts))
    return out


def read_prompts(path: str | os.PathLike) -> list[tuple[str, str]]:
    if not os.path.exists(path):
        raise InputError(f"missing file: {path}")
    out = []
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            obj = json.loads(raw)
            if "prompt" not in obj:
                raise InputError(f"line {line_no}: prompt key required")
            out.append((obj.get("trace_id", f"prompt{line_no:05d}"),
                        obj["prompt"]))
    return out


def _guard_disk(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except OSError as exc:
        if exc.errno == errno.ENOSPC:
            raise DiskFull(str(exc)) from exc
        raise


def write_sidecar(path: str | os.PathLike, values: np.ndarray) -> None:
    arr = np.ascontiguousarray(values, dtype="<f4")
    if arr.ndim != 2:
        raise InputError(f"feature matrix must be 2-D, got {arr.ndim}-D")
    rows, dim = arr.shape
    header = OPTX_MAGIC + np.array([OPTX_VERSION, rows, dim],
                                   dtype="<u4").tobytes()

    def _write():
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(arr.tobytes(order="C"))

    _guard_disk(_write)


def trace_record(trace: InputTrace, k: int, model_id: str,
                 chosen_lps: list[float],
                 topk: list[list[tuple[int, float]]]) -> dict:
    tokens = []
    for i, (tid, text) in enumerate(zip(trace.token_ids, trace.token_texts)):
        tokens.append({
            "i": i, "id": tid, "text": text, "lp": chosen_lps[i],
            "topk": [[int(t), float(lp)] for t, lp in topk[i]],
        })
    return {
        "trace_id": trace.trace_id,
        "prompt": trace.prompt,
        "source": trace.source,
        "model": model_id,
        "k": k,
        "solution_text": trace.solution_text,
        "final_answer": trace.final_answer,
        "cot_tokens": tokens,
    }


def write_trace_records(records: list[dict], path: str | os.PathLike) -> None:
    def _write():
        with open(path, "w", encoding="utf-8") as fh:
            for obj in records:
                fh.write(json.dumps(obj, ensure_ascii=False,
                                    separators=(",", ":")) + "\n")

    _guard_disk(_write)
