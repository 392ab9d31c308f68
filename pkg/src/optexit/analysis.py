"""Signal studies around the first arrival of the final answer: the top-K
confidence measure, event-locked averaging, thinking-token usage shift, and
rate-vs-length binning.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import EmptyInput, EmptyTopK, LengthMismatch, TooFewPoints
from .traces import TokenRecord, Trace


@dataclass
class SignalSeries:
    trace_id: str
    values: list[float]


@dataclass
class EventLockedAverage:
    offsets: list[int]
    means: list[float]
    stderrs: list[float]
    counts: list[int]


@dataclass
class ShiftPoint:
    trace_id: str
    rate_before: float
    rate_after: float
    cot_length: int


@dataclass
class RateLengthBin:
    edge_lo: float
    edge_hi: float
    mean_before: float
    ci95_before: float
    mean_after: float
    ci95_after: float
    n: int


def token_confidence(record: TokenRecord) -> float:
    """Negative mean logprob over the top-K candidates, in nats.

    Always >= 0; a flat top-K slice of a size-V uniform distribution gives
    exactly ln V (fsum keeps the uniform case bit-exact).
    """
    if not record.top_k:
        raise EmptyTopK(f"token {record.index}")
    return -(math.fsum(e.logprob for e in record.top_k) / len(record.top_k))


def confidence_series(trace: Trace) -> SignalSeries:
    return SignalSeries(trace_id=trace.trace_id,
                        values=[token_confidence(t) for t in trace.cot_tokens])


def logprob_series(trace: Trace) -> SignalSeries:
    return SignalSeries(trace_id=trace.trace_id,
                        values=[t.chosen_logprob for t in trace.cot_tokens])


def event_locked_average(series: list[SignalSeries], positions: list[int],
                         window: tuple[int, int]) -> EventLockedAverage:
    """Align each series so its answer-arrival index sits at offset 0, then
    average across series per offset.

    A series that does not cover an offset is excluded from that offset
    (zero-padding would bias the mean toward 0). stderr is the sample
    standard deviation over the covering series divided by sqrt(count),
    0 where fewer than two series cover.
    """
    if len(series) != len(positions):
        raise LengthMismatch(f"{len(series)} series vs {len(positions)} positions")
    l_pre, l_post = window
    if l_pre < 0 or l_post < 0:
        raise EmptyInput("window sizes must be >= 0")
    for s, p in zip(series, positions):
        if not 0 <= p < len(s.values):
            raise LengthMismatch(
                f"position {p} outside series {s.trace_id} of length {len(s.values)}")
    offsets, means, stderrs, counts = [], [], [], []
    for o in range(-l_pre, l_post + 1):
        vals = [s.values[p + o] for s, p in zip(series, positions)
                if 0 <= p + o < len(s.values)]
        if not vals:
            continue
        arr = np.asarray(vals, dtype=np.float64)
        mean = float(arr.mean())
        stderr = float(arr.std(ddof=1) / math.sqrt(len(arr))) if len(arr) >= 2 else 0.0
        offsets.append(o)
        means.append(mean)
        stderrs.append(stderr)
        counts.append(len(arr))
    return EventLockedAverage(offsets=offsets, means=means,
                              stderrs=stderrs, counts=counts)


def moving_average(values: list[float], width: int) -> list[float]:
    """Centered moving average for presentation; width 1 is a no-op."""
    if width <= 1:
        return list(values)
    half = width // 2
    out = []
    for i in range(len(values)):
        lo = max(0, i - half)
        hi = min(len(values), i + half + 1)
        out.append(float(np.mean(values[lo:hi])))
    return out


def _normalize_token(text: str) -> str:
    return text.strip().lower()


def token_shift_rates(trace: Trace, i_star: int, needle: str) -> ShiftPoint:
    """Occurrence rate of a thinking token before vs after answer arrival.

    Matching is on the lowercased, whitespace-stripped token text, so
    subword variants like " Hmm" count. The arrival index belongs to the
    after side; an arrival at index 0 leaves the before rate 0 by rule.
    """
    m = trace.m
    if not 0 <= i_star < m:
        raise LengthMismatch(f"i_star {i_star} outside [0, {m})")
    target = _normalize_token(needle)
    before = sum(1 for t in trace.cot_tokens[:i_star]
                 if _normalize_token(t.token_text) == target)
    after = sum(1 for t in trace.cot_tokens[i_star:]
                if _normalize_token(t.token_text) == target)
    rate_before = before / i_star if i_star > 0 else 0.0
    rate_after = after / (m - i_star)
    return ShiftPoint(trace_id=trace.trace_id, rate_before=rate_before,
                      rate_after=rate_after, cot_length=m)


def shift_summary(points: list[ShiftPoint]) -> dict:
    if not points:
        raise EmptyInput("no shift points")
    n = len(points)
    above = sum(1 for p in points if p.rate_after > p.rate_before)
    origin = sum(1 for p in points if p.rate_before == 0.0 and p.rate_after == 0.0)
    return {
        "above_diagonal_pct": 100.0 * above / n,
        "at_origin_pct": 100.0 * origin / n,
        "n": n,
    }


def rate_vs_length(points: list[ShiftPoint], bins: int = 10) -> list[RateLengthBin]:
    """Bin shift points by CoT length at empirical percentiles so each bin
    holds about n/bins points; equal percentile edges collapse into fewer
    bins, and empty bins are omitted."""
    if len(points) < bins:
        raise TooFewPoints(f"{len(points)} points for {bins} bins")
    lengths = np.asarray([p.cot_length for p in points], dtype=np.float64)
    edges = np.percentile(lengths, np.linspace(0.0, 100.0, bins + 1))
    uniq = [edges[0]]
    for e in edges[1:]:
        if e > uniq[-1]:
            uniq.append(e)
    out = []
    if len(uniq) == 1:
        out.append(_make_bin(uniq[0], uniq[0], list(points)))
        return out
    for bi in range(len(uniq) - 1):
        lo, hi = uniq[bi], uniq[bi + 1]
        last = bi == len(uniq) - 2
        members = [p for p in points
                   if (lo <= p.cot_length < hi) or (last and p.cot_length == hi)]
        if members:
            out.append(_make_bin(lo, hi, members))
    return out


def _make_bin(lo: float, hi: float, members: list[ShiftPoint]) -> RateLengthBin:
    before = np.asarray([p.rate_before for p in members], dtype=np.float64)
    after = np.asarray([p.rate_after for p in members], dtype=np.float64)
    n = len(members)

    def ci95(arr):
        if n < 2:
            return 0.0
        return float(1.96 * arr.std(ddof=1) / math.sqrt(n))

    return RateLengthBin(
        edge_lo=float(lo), edge_hi=float(hi),
        mean_before=float(before.mean()), ci95_before=ci95(before),
        mean_after=float(after.mean()), ci95_after=ci95(after),
        n=n,
    )


# ---------------------------------------------------------------------------
# CSV emitters
# ---------------------------------------------------------------------------

def write_event_lock_csv(avg: EventLockedAverage, path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["offset", "mean", "stderr", "count"])
        for o, m, s, c in zip(avg.offsets, avg.means, avg.stderrs, avg.counts):
            w.writerow([o, repr(m), repr(s), c])


def write_shift_csv(points: list[ShiftPoint], path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["trace_id", "rate_before", "rate_after", "cot_length"])
        for p in points:
            w.writerow([p.trace_id, repr(p.rate_before), repr(p.rate_after),
                        p.cot_length])


def write_rate_length_csv(rows: list[RateLengthBin], path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "mean_before", "ci95_before",
                    "mean_after", "ci95_after", "n"])
        for r in rows:
            w.writerow([repr(r.edge_lo), repr(r.edge_hi), repr(r.mean_before),
                        repr(r.ci95_before), repr(r.mean_after),
                        repr(r.ci95_after), r.n])
