"""Answer-position curation: extract the final answer from the solution,
identify the earliest span of the CoT that reaches it, verify the span with
retry feedback, then fuzzy-locate the span and convert its end to a token
index. Verified positions become labeled training traces.

All three LLM steps go through a pipeline endpoint that may be a stronger
model than the trace generator. Prompt templates are data, not code, so a
curation run is auditable (see data/curation_prompts.json).
"""

from __future__ import annotations

import json
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources

from .errors import (
    AllFailed,
    BelowThreshold,
    DataError,
    EmptySolution,
    LlmRefusal,
    RetriesExhausted,
    SpanNotFound,
)
from .gateway import LlmClient, LlmRequest
from .traces import (
    AnswerPosition,
    LabeledTrace,
    Trace,
    assign_labels,
    char_to_token,
)

_TRAILING_PUNCT = ".,;:!?"


@dataclass
class CurationConfig:
    max_retries: int = 4
    min_fuzzy_score: float = 0.9
    max_tokens: int = 512
    temperature: float = 0.0
    prompts_path: str | None = None

    def __post_init__(self):
        if self.max_retries < 1:
            raise DataError("max_retries must be >= 1")
        if not 0.0 < self.min_fuzzy_score <= 1.0:
            raise DataError("min_fuzzy_score must be in (0, 1]")


@dataclass
class FeedbackLog:
    rejected_spans: list[str] = field(default_factory=list)


@dataclass
class CurationReport:
    total: int
    succeeded: int
    rows: list[dict]  # trace_id, status, retries_used, token_index

    @property
    def success_rate(self) -> float:
        return self.succeeded / self.total if self.total else 0.0


def load_prompts(path: str | None = None) -> dict:
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    ref = resources.files("optexit").joinpath("data/curation_prompts.json")
    return json.loads(ref.read_text(encoding="utf-8"))


def normalize_answer(text: str) -> str:
    """Conservative canonical form: trim, collapse internal whitespace,
    strip trailing sentence punctuation."""
    out = re.sub(r"\s+", " ", text.strip())
    return out.rstrip(_TRAILING_PUNCT + " ")


def parse_boxed(text: str) -> str | None:
    """Content of the last \\boxed{...} marker, brace-balanced; None when
    absent or unbalanced."""
    marker = r"\boxed{"
    start = text.rfind(marker)
    if start == -1:
        return None
    depth = 1
    i = start + len(marker)
    begin = i
    while i < len(text):
        ch = text[i]
        if ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return text[begin:i]
        i += 1
    return None


def extract_answer(solution_text: str, llm: LlmClient,
                   config: CurationConfig | None = None) -> str:
    """Final answer from a solution; a boxed marker is parsed locally and
    the LLM is consulted only when that fails."""
    config = config or CurationConfig()
    if not solution_text.strip():
        raise EmptySolution("solution text is empty")
    boxed = parse_boxed(solution_text)
    if boxed is not None:
        return normalize_answer(boxed)
    prompts = load_prompts(config.prompts_path)
    req = LlmRequest(
        role_tag="extract",
        system_prompt=prompts["extract"]["system"],
        user_prompt=prompts["extract"]["user"].format(solution=solution_text),
        max_tokens=config.max_tokens,
        temperature=config.temperature,
    )
    reply = llm.complete(req).text.strip()
    if not reply or reply.upper() == "NONE":
        raise LlmRefusal("extractor returned no answer")
    return normalize_answer(reply)


def _edit_distance_row(span: str, window: str) -> list[int]:
    """Last DP column per window prefix: distances span vs window[:j]."""
    m = len(span)
    prev = list(range(m + 1))
    # dist[j] after processing window[:j]; we need distance for every prefix,
    # so carry the full DP table's bottom row as we extend the window.
    bottom = [prev[m]]
    for j, wc in enumerate(window, start=1):
        cur = [j]
        for i, sc in enumerate(span, start=1):
            cost = 0 if sc == wc else 1
            cur.append(min(prev[i] + 1, cur[i - 1] + 1, prev[i - 1] + cost))
        prev = cur
        bottom.append(cur[m])
    return bottom


def fuzzy_match_span(span: str, cot_text: str,
                     min_score: float) -> tuple[int, int, float]:
    """Best alignment of span inside cot_text.

    Score is 1 - edit_distance / max(len(span), len(window)). An exact
    substring scores 1.0 at its earliest occurrence; otherwise windows of
    span length +/- 20 percent are scanned at every start. Ties break to
    the earliest, shortest window.
    """
    if not span:
        raise DataError("span must be non-empty")
    exact = cot_text.find(span)
    if exact != -1:
        return exact, exact + len(span), 1.0
    n, m = len(cot_text), len(span)
    lo = max(1, int(m - m * 0.2))
    hi = int(m + m * 0.2)
    best = (-1.0, 0, 0)
    for start in range(0, max(n - lo + 1, 0)):
        max_len = min(hi, n - start)
        if max_len < lo:
            continue
        bottom = _edit_distance_row(span, cot_text[start:start + max_len])
        for length in range(lo, max_len + 1):
            dist = bottom[length]
            score = 1.0 - dist / max(m, length)
            if score > best[0]:
                best = (score, start, start + length)
    score, s, e = best
    if score < min_score:
        raise BelowThreshold(max(score, 0.0))
    return s, e, score


def _parse_bool(reply: str) -> bool:
    return reply.strip().lower().startswith("true")


def locate_answer(trace: Trace, config: CurationConfig,
                  llm: LlmClient) -> AnswerPosition:
    """Identify-verify loop with feedback, then span-to-token conversion.

    Each failed verification appends the rejected span to the feedback the
    identifier sees next round. Only verified spans are ever returned.
    """
    if not trace.final_answer:
        raise DataError(f"{trace.trace_id}: final_answer must be set first")
    prompts = load_prompts(config.prompts_path)
    answer = trace.final_answer
    cot = trace.cot_text()
    log = FeedbackLog()
    for attempt in range(config.max_retries):
        feedback = "".join(
            prompts["feedback_item"].format(span=s) for s in log.rejected_spans)
        ident = LlmRequest(
            role_tag="identify",
            system_prompt=prompts["identify"]["system"],
            user_prompt=prompts["identify"]["user"].format(
                answer=answer, cot=cot, feedback=feedback),
            max_tokens=config.max_tokens,
            temperature=config.temperature,
        )
        span = llm.complete(ident).text.strip().strip('"')
        verify = LlmRequest(
            role_tag="verify",
            system_prompt=prompts["verify"]["system"],
            user_prompt=prompts["verify"]["user"].format(span=span, answer=answer),
            max_tokens=16,
            temperature=config.temperature,
        )
        if _parse_bool(llm.complete(verify).text):
            try:
                start, end, _score = fuzzy_match_span(span, cot, config.min_fuzzy_score)
            except BelowThreshold as exc:
                raise SpanNotFound(exc.best_score) from exc
            return AnswerPosition(
                trace_id=trace.trace_id,
                span_text=span,
                char_start=start,
                char_end=end,
                token_index=char_to_token(end, trace.cot_tokens),
                verified=True,
                retries_used=attempt,
            )
        log.rejected_spans.append(span)
    raise RetriesExhausted(config.max_retries, log.rejected_spans)


def curate_trace(trace: Trace, config: CurationConfig,
                 llm: LlmClient) -> tuple[LabeledTrace | None, dict]:
    """One trace through extract -> locate -> label; returns (result, report row)."""
    row = {"trace_id": trace.trace_id, "status": "ok",
           "retries_used": 0, "token_index": ""}
    try:
        if not trace.final_answer:
            trace.final_answer = extract_answer(trace.solution_text, llm, config)
        answer = locate_answer(trace, config, llm)
        row["retries_used"] = answer.retries_used
        row["token_index"] = answer.token_index
        return assign_labels(trace, answer), row
    except (EmptySolution, LlmRefusal):
        row["status"] = "extract_failed"
    except RetriesExhausted as exc:
        row["status"] = "retries_exhausted"
        row["retries_used"] = exc.max_retries
    except SpanNotFound:
        row["status"] = "span_not_found"
    except DataError:
        row["status"] = "error"
    return None, row


def assemble_dataset(traces: list[Trace], config: CurationConfig,
                     llm: LlmClient) -> tuple[list[LabeledTrace], CurationReport]:
    """Curate a corpus with bounded concurrency; failed traces are dropped
    and counted. Outputs are sorted by trace_id for determinism."""
    if not traces:
        raise DataError("no traces to curate")
    results: list[LabeledTrace] = []
    rows: list[dict] = []
    with ThreadPoolExecutor(max_workers=llm.max_inflight) as pool:
        futures = [pool.submit(curate_trace, t, config, llm) for t in traces]
        for fut in futures:
            labeled, row = fut.result()
            rows.append(row)
            if labeled is not None:
                results.append(labeled)
    if not results:
        raise AllFailed(f"all {len(traces)} traces failed curation")
    results.sort(key=lambda lt: lt.trace.trace_id)
    rows.sort(key=lambda r: r["trace_id"])
    return results, CurationReport(total=len(traces), succeeded=len(results),
                                   rows=rows)
