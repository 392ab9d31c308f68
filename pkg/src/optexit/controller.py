"""Online early-exit engine: per-token decision bits, sliding-window majority
vote, think-terminator injection, plus the hindsight-optimal length evaluator
and the truncation sweep.

A session is strictly sequential; cross-trace work parallelizes under the
gateway's in-flight bound.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum

from .curation import normalize_answer, parse_boxed
from .errors import (
    DataError,
    FeatureUnavailable,
    OutOfRange,
    SteppedAfterExit,
    TemplateError,
)
from .gateway import TRUNCATION_HEADER, LlmClient, LlmRequest
from .probe import ProbeModel, predict
from .traces import THINK_CLOSE, THINK_OPEN, TokenRecord, Trace, think_region


class Decision(Enum):
    CONTINUE = "continue"
    EXIT = "exit"


@dataclass
class ModelTemplate:
    think_open: str = THINK_OPEN
    think_close: str = THINK_CLOSE

    def __post_init__(self):
        if not self.think_open or not self.think_close:
            raise TemplateError("think markers must be non-empty")


@dataclass
class ExitConfig:
    window: int = 10
    majority_min: int = 6
    prob_threshold: float = 0.7
    max_cot_tokens: int = 32768
    warmup: str = "require_full_window"  # or "allow_partial"

    def __post_init__(self):
        if not 1 <= self.majority_min <= self.window:
            raise DataError("majority_min must be in [1, window]")
        if not 0.0 < self.prob_threshold < 1.0:
            raise DataError("prob_threshold must be in (0, 1)")
        if self.warmup not in ("require_full_window", "allow_partial"):
            raise DataError(f"unknown warmup mode {self.warmup!r}")


@dataclass
class ExitSession:
    window: int
    bits: deque = field(default_factory=deque)
    tokens_seen: int = 0
    exited_at: int | None = None
    in_think_region: bool = True

    def __post_init__(self):
        self.bits = deque(self.bits, maxlen=self.window)


@dataclass
class ExitOutcome:
    trace_id: str
    policy: str
    m_early: int
    m: int | None
    compression_rate: float | None
    solution_text: str
    answer: str
    matched_full_run_answer: bool | None = None
    note: str = ""


def step(session: ExitSession, p: float, config: ExitConfig) -> Decision:
    """Advance the session by one token probability.

    The bit is 1 iff p clears the threshold inside the think region; the
    session exits at the first step where the trailing window holds at
    least majority_min ones (never before the window fills, unless warmup
    allows partial windows).
    """
    if session.exited_at is not None:
        raise SteppedAfterExit(f"already exited at {session.exited_at}")
    if not 0.0 <= p <= 1.0:
        raise OutOfRange(f"probability {p} outside [0, 1]")
    session.tokens_seen += 1
    bit = 1 if (session.in_think_region and p >= config.prob_threshold) else 0
    session.bits.append(bit)
    window_ready = (len(session.bits) == config.window
                    or config.warmup == "allow_partial")
    if window_ready and sum(session.bits) >= config.majority_min:
        session.exited_at = session.tokens_seen
        return Decision.EXIT
    return Decision.CONTINUE


def compression_rate(m_early: int, m: int) -> float:
    if not 1 <= m_early <= m:
        raise OutOfRange(f"need 1 <= M_early <= M, got ({m_early}, {m})")
    return m_early / m


def _extract_solution_answer(text: str) -> str:
    boxed = parse_boxed(text)
    return normalize_answer(boxed if boxed is not None else text)


def truncation_messages(prompt: str, cot_tokens: list[TokenRecord], keep: int,
                        template: ModelTemplate) -> tuple[str, dict]:
    """Continuation prompt for a CoT truncated to its first `keep` tokens,
    plus the sentinel header carrying the truncation index."""
    prefix = "".join(t.token_text for t in cot_tokens[:keep])
    user = f"{prompt}{prefix}{template.think_close}\n"
    return user, {TRUNCATION_HEADER: str(keep)}


def solve_after_truncation(prompt: str, cot_tokens: list[TokenRecord], keep: int,
                           llm: LlmClient, template: ModelTemplate,
                           max_tokens: int = 2048) -> str:
    user, headers = truncation_messages(prompt, cot_tokens, keep, template)
    req = LlmRequest(role_tag="solve_after_truncation", user_prompt=user,
                     max_tokens=max_tokens)
    return llm.complete(req, extra_headers=headers).text


def simulate_exit(trace: Trace, model: ProbeModel, provider,
                  config: ExitConfig) -> tuple[int | None, ExitSession]:
    """Replay a stored CoT through the probe; returns the exit step (token
    count) or None when the stream runs out without a majority."""
    fm = provider.for_trace(trace)
    session = ExitSession(window=config.window)
    start, end = think_region(trace)
    for i in range(trace.m):
        session.in_think_region = start <= i < end
        p = predict(model, fm.values[i])
        if step(session, p, config) is Decision.EXIT:
            return session.exited_at, session
        if session.tokens_seen >= config.max_cot_tokens:
            break
    return None, session


def run_session(prompt: str, probe_model: ProbeModel, feature_provider,
                config: ExitConfig, llm: LlmClient,
                reference: Trace | None = None,
                template: ModelTemplate | None = None,
                trace_id: str = "live",
                max_tokens: int = 4096,
                temperature: float = 0.7) -> ExitOutcome:
    """Stream a live generation, scoring every CoT token through the probe.

    On an exit decision the stream is aborted and the model is asked to
    finish from the truncated CoT plus the think terminator. Without an
    exit the run degenerates to vanilla. A reference trace supplies the
    full-run CoT length and answer for compression and match reporting;
    without one (and with an early exit) they are unknowable and left None.
    """
    if not getattr(feature_provider, "online", False):
        raise FeatureUnavailable(
            f"{getattr(feature_provider, 'name', type(feature_provider).__name__)} "
            "cannot follow a live stream")
    template = template or ModelTemplate()
    session = ExitSession(window=config.window)
    feat = feature_provider.session()
    cot_tokens: list[TokenRecord] = []
    state = {"thinking": True, "seen_close": False}
    tail: list[str] = []

    def on_token(record: TokenRecord):
        txt = record.token_text.strip()
        if not state["thinking"]:
            tail.append(record.token_text)
            return None
        if txt == template.think_close:
            state["thinking"] = False
            state["seen_close"] = True
            return None
        if txt == template.think_open:
            return None  # marker itself is not CoT content
        cot_tokens.append(record)
        p = predict(probe_model, feat.step(record))
        if step(session, p, config) is Decision.EXIT:
            return False
        if session.tokens_seen >= config.max_cot_tokens:
            session.exited_at = session.tokens_seen
            return False
        return None

    req = LlmRequest(role_tag="generate", user_prompt=prompt,
                     want_logprobs=True, top_logprobs=20,
                     max_tokens=max_tokens, temperature=temperature)
    completion = llm.stream(req, on_token)

    ref_m = reference.m if reference is not None else None
    ref_answer = (normalize_answer(reference.final_answer)
                  if reference is not None and reference.final_answer else None)

    if session.exited_at is not None:
        m_early = session.exited_at
        solution = solve_after_truncation(prompt, cot_tokens, m_early, llm,
                                          template)
        answer = _extract_solution_answer(solution)
        m = ref_m
        cr = compression_rate(m_early, m) if m is not None else None
    else:
        m_early = len(cot_tokens)
        m = ref_m if ref_m is not None else m_early
        solution = "".join(tail) if state["seen_close"] else completion.text
        answer = _extract_solution_answer(solution)
        cr = compression_rate(m_early, m) if m_early >= 1 else None

    matched = (answer == ref_answer) if ref_answer is not None else None
    return ExitOutcome(
        trace_id=reference.trace_id if reference is not None else trace_id,
        policy="optexit",
        m_early=m_early,
        m=m,
        compression_rate=cr,
        solution_text=solution,
        answer=answer,
        matched_full_run_answer=matched,
    )


def horl(trace: Trace, llm: LlmClient, strategy: str = "exact_scan",
         grid_points: int = 21,
         template: ModelTemplate | None = None) -> int:
    """Smallest truncation index at which the model still produces the
    full run's answer.

    exact_scan probes every index ascending and is the oracle; grid probes
    evenly spaced indices and refines inside the first succeeding interval,
    which can overshoot on non-monotone behavior. The full length is always
    a valid fallback.
    """
    if not trace.final_answer:
        raise DataError(f"{trace.trace_id}: full-run answer required")
    if strategy not in ("exact_scan", "grid"):
        raise DataError(f"unknown strategy {strategy!r}")
    template = template or ModelTemplate()
    target = normalize_answer(trace.final_answer)
    m = trace.m

    def succeeds(i: int) -> bool:
        solution = solve_after_truncation(trace.prompt, trace.cot_tokens, i,
                                          llm, template)
        return _extract_solution_answer(solution) == target

    if strategy == "exact_scan":
        for i in range(1, m + 1):
            if succeeds(i):
                return i
        return m

    if grid_points < 2:
        raise DataError("grid needs at least 2 points")
    spacing = math.ceil(m / (grid_points - 1))
    grid = list(range(spacing, m + 1, spacing))
    if not grid or grid[-1] != m:
        grid.append(m)
    prev = 0
    for g in grid:
        if succeeds(g):
            for i in range(prev + 1, g):
                if succeeds(i):
                    return i
            return g
        prev = g
    return m


@dataclass
class SweepRow:
    fraction: float
    mean_accuracy: float
    mean_cr: float
    n: int


@dataclass
class SweepResult:
    rows: list[SweepRow]
    horl_marker: float | None = None  # mean first-arrival fraction, when known


def truncation_sweep(traces: list[Trace], fractions: list[float],
                     llm: LlmClient, ground_truth: dict[str, str],
                     answer_positions: dict[str, int] | None = None,
                     template: ModelTemplate | None = None) -> SweepResult:
    """Accuracy and compression after truncating every CoT at each fraction.

    Fractions are deduplicated and swept ascending. Accuracy scores the
    extracted answer against the supplied ground truth.
    """
    if not traces:
        raise DataError("no traces to sweep")
    bad = [f for f in fractions if not 0.0 < f <= 1.0]
    if bad:
        raise OutOfRange(f"fractions outside (0, 1]: {bad}")
    template = template or ModelTemplate()
    rows = []
    for f in sorted(set(fractions)):
        correct = 0
        crs = []
        for trace in traces:
            keep = max(1, math.ceil(f * trace.m))
            solution = solve_after_truncation(trace.prompt, trace.cot_tokens,
                                              keep, llm, template)
            answer = _extract_solution_answer(solution)
            truth = normalize_answer(ground_truth[trace.trace_id])
            correct += int(answer == truth)
            crs.append(keep / trace.m)
        rows.append(SweepRow(fraction=f,
                             mean_accuracy=correct / len(traces),
                             mean_cr=sum(crs) / len(crs),
                             n=len(traces)))
    marker = None
    if answer_positions:
        fracs = [(answer_positions[t.trace_id] + 1) / t.m
                 for t in traces if t.trace_id in answer_positions]
        if fracs:
            marker = sum(fracs) / len(fracs)
    return SweepResult(rows=rows, horl_marker=marker)
