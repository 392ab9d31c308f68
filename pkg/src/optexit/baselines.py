"""Comparison exit policies: direct-answer (no thinking), chunked mean-
probability exit, and periodic consistency probing. All outcomes share the
ExitOutcome shape so the reporter stays policy-agnostic.

The chunked policy here is the simplified description used for comparison,
not a faithful port of the original method it approximates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

from .controller import (
    ExitOutcome,
    ModelTemplate,
    _extract_solution_answer,
    solve_after_truncation,
)
from .curation import normalize_answer, parse_boxed
from .errors import DataError, MissingLogprobs
from .gateway import TRUNCATION_HEADER, LlmClient, LlmRequest
from .traces import TokenRecord, Trace

DYNASOR_PROBE_PROMPT = (
    "Oh, I suddenly got the answer to the whole problem, Final Answer: \\boxed{"
)


@dataclass
class DeerConfig:
    chunk_tokens: int = 64
    prob_threshold: float = 0.95

    def __post_init__(self):
        if self.chunk_tokens < 1:
            raise DataError("chunk_tokens must be >= 1")
        if not 0.0 < self.prob_threshold < 1.0:
            raise DataError("prob_threshold must be in (0, 1)")


@dataclass
class DynasorConfig:
    interval_tokens: int = 64
    consistency_w: int = 8
    probe_prompt: str = DYNASOR_PROBE_PROMPT

    def __post_init__(self):
        if self.consistency_w < 2:
            raise DataError("consistency_w must be >= 2")
        if self.interval_tokens < 1:
            raise DataError("interval_tokens must be >= 1")


def nothinking(prompt: str, llm: LlmClient,
               template: ModelTemplate | None = None,
               reference: Trace | None = None,
               trace_id: str = "live",
               max_tokens: int = 2048) -> ExitOutcome:
    """Skip the reasoning phase: prefill an empty think block and ask for the
    solution directly. Zero CoT tokens by convention; with a reference
    vanilla length the compression rate is reported as 0 and flagged."""
    template = template or ModelTemplate()
    user = f"{prompt}{template.think_open}\n\n{template.think_close}\n"
    req = LlmRequest(role_tag="generate", user_prompt=user, max_tokens=max_tokens)
    solution = llm.complete(req).text
    answer = _extract_solution_answer(solution)
    ref_m = reference.m if reference is not None else None
    ref_answer = (normalize_answer(reference.final_answer)
                  if reference is not None and reference.final_answer else None)
    return ExitOutcome(
        trace_id=reference.trace_id if reference is not None else trace_id,
        policy="nothinking",
        m_early=0,
        m=ref_m,
        compression_rate=0.0 if ref_m is not None else None,
        solution_text=solution,
        answer=answer,
        matched_full_run_answer=(answer == ref_answer) if ref_answer else None,
        note="empty-think",
    )


def deer_exit(records: Iterable[TokenRecord], config: DeerConfig) -> int | None:
    """Exit index under the chunked mean-probability rule: after every
    complete chunk, exit at its final token (0-based) when the chunk's mean
    chosen-token probability exceeds the threshold."""
    chunk: list[float] = []
    index = -1
    for record in records:
        if record.chosen_logprob is None:
            raise MissingLogprobs(f"token {record.index}")
        index += 1
        chunk.append(math.exp(record.chosen_logprob))
        if len(chunk) == config.chunk_tokens:
            if sum(chunk) / len(chunk) > config.prob_threshold:
                return index
            chunk = []
    return None


def dynasor_exit(prompt: str, llm: LlmClient, config: DynasorConfig,
                 template: ModelTemplate | None = None,
                 reference: Trace | None = None,
                 trace_id: str = "live",
                 max_tokens: int = 4096) -> ExitOutcome:
    """Probe the model for an interim answer every fixed token interval and
    exit once the last consistency_w probes agree.

    An empty interim extraction never matches anything, so it resets the
    consecutive run. On exit, the consistent probe answer is the outcome.
    """
    template = template or ModelTemplate()
    cot_tokens: list[TokenRecord] = []
    answers: list[str] = []
    state = {"exit_at": None, "thinking": True}
    tail: list[str] = []

    def probe_now() -> str:
        # A probe is itself a truncated-CoT continuation; carrying the index
        # lets scripted servers answer it like any other truncation query.
        prefix = "".join(t.token_text for t in cot_tokens)
        req = LlmRequest(
            role_tag="solve_after_truncation",
            user_prompt=f"{prompt}{prefix}{config.probe_prompt}",
            max_tokens=128,
        )
        reply = llm.complete(
            req, extra_headers={TRUNCATION_HEADER: str(len(cot_tokens))}).text
        boxed = parse_boxed(reply)
        if boxed is not None:
            return normalize_answer(boxed)
        brace = reply.find("}")
        return normalize_answer(reply[:brace] if brace != -1 else reply)

    def consistent() -> bool:
        if len(answers) < config.consistency_w:
            return False
        window = answers[-config.consistency_w:]
        return all(a and a == window[0] for a in window)

    def on_token(record: TokenRecord):
        txt = record.token_text.strip()
        if not state["thinking"]:
            tail.append(record.token_text)
            return None
        if txt == template.think_close:
            state["thinking"] = False
            return None
        if txt == template.think_open:
            return None
        cot_tokens.append(record)
        if len(cot_tokens) % config.interval_tokens == 0:
            answers.append(probe_now())
            if consistent():
                state["exit_at"] = len(cot_tokens)
                return False
        return None

    req = LlmRequest(role_tag="generate", user_prompt=prompt,
                     max_tokens=max_tokens)
    completion = llm.stream(req, on_token)

    ref_m = reference.m if reference is not None else None
    ref_answer = (normalize_answer(reference.final_answer)
                  if reference is not None and reference.final_answer else None)

    if state["exit_at"] is not None:
        m_early = state["exit_at"]
        answer = answers[-1]
        solution = answer
        m = ref_m
        cr = m_early / m if m else None
    else:
        m_early = len(cot_tokens)
        m = ref_m if ref_m is not None else m_early
        solution = "".join(tail) if tail else completion.text
        answer = _extract_solution_answer(solution)
        cr = m_early / m if m and m_early >= 1 else None

    return ExitOutcome(
        trace_id=reference.trace_id if reference is not None else trace_id,
        policy="dynasor",
        m_early=m_early,
        m=m,
        compression_rate=cr,
        solution_text=solution,
        answer=answer,
        matched_full_run_answer=(answer == ref_answer) if ref_answer else None,
    )


def vanilla_outcome(trace: Trace) -> ExitOutcome:
    """Score the stored full run as-is."""
    answer = (normalize_answer(trace.final_answer) if trace.final_answer
              else _extract_solution_answer(trace.solution_text))
    return ExitOutcome(
        trace_id=trace.trace_id,
        policy="vanilla",
        m_early=trace.m,
        m=trace.m,
        compression_rate=1.0,
        solution_text=trace.solution_text,
        answer=answer,
        matched_full_run_answer=True,
    )


def deer_outcome(trace: Trace, llm: LlmClient, config: DeerConfig,
                 template: ModelTemplate | None = None) -> ExitOutcome:
    """Replay the stored CoT under the chunk rule; on exit, finish from the
    truncated CoT, otherwise fall back to the vanilla run."""
    template = template or ModelTemplate()
    idx = deer_exit(trace.cot_tokens, config)
    ref_answer = (normalize_answer(trace.final_answer)
                  if trace.final_answer else None)
    if idx is None:
        out = vanilla_outcome(trace)
        out.policy = "deer"
        return out
    m_early = idx + 1
    solution = solve_after_truncation(trace.prompt, trace.cot_tokens, m_early,
                                      llm, template)
    answer = _extract_solution_answer(solution)
    return ExitOutcome(
        trace_id=trace.trace_id,
        policy="deer",
        m_early=m_early,
        m=trace.m,
        compression_rate=m_early / trace.m,
        solution_text=solution,
        answer=answer,
        matched_full_run_answer=(answer == ref_answer) if ref_answer else None,
    )
