"""Benchmark aggregation: per-(policy, dataset) accuracy/token/compression
tables, Pareto filtering, and small self-contained SVG plots.

CSV is the contract; the SVG writer has a fixed deterministic layout and is
explicitly non-contractual.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from xml.sax.saxutils import escape

from .controller import ExitOutcome
from .errors import EmptyResults, MixedDatasets


@dataclass
class BenchmarkRow:
    policy: str
    dataset: str
    accuracy_pct: float
    mean_tokens: float
    mean_cr_pct: float
    n: int


def report(outcomes: list[ExitOutcome], correct: dict[str, bool] | list[bool],
           dataset_of: dict[str, str] | None = None) -> list[BenchmarkRow]:
    """Aggregate outcomes into one row per (policy, dataset).

    `correct` carries ground-truth correctness per outcome, either aligned
    by position or keyed by trace_id. Outcomes without a compression rate
    (standalone runs) count as 100 percent.
    """
    if not outcomes:
        raise EmptyResults("no outcomes")
    if isinstance(correct, dict):
        flags = [bool(correct[o.trace_id]) for o in outcomes]
    else:
        if len(correct) != len(outcomes):
            raise EmptyResults("correctness list does not align with outcomes")
        flags = [bool(c) for c in correct]
    groups: dict[tuple[str, str], list[tuple[ExitOutcome, bool]]] = {}
    for o, c in zip(outcomes, flags):
        dataset = (dataset_of or {}).get(o.trace_id, "all")
        groups.setdefault((o.policy, dataset), []).append((o, c))
    rows = []
    for (policy, dataset), members in sorted(groups.items()):
        n = len(members)
        acc = 100.0 * sum(c for _, c in members) / n
        toks = sum(o.m_early for o, _ in members) / n
        crs = [o.compression_rate if o.compression_rate is not None else 1.0
               for o, _ in members]
        rows.append(BenchmarkRow(policy=policy, dataset=dataset,
                                 accuracy_pct=acc, mean_tokens=toks,
                                 mean_cr_pct=100.0 * sum(crs) / n, n=n))
    return rows


def pareto(rows: list[BenchmarkRow]) -> list[BenchmarkRow]:
    """Non-dominated subset under (accuracy up, compression down); exact
    ties are kept."""
    if not rows:
        raise EmptyResults("no rows")
    datasets = {r.dataset for r in rows}
    if len(datasets) > 1:
        raise MixedDatasets(f"rows span datasets {sorted(datasets)}")
    kept = []
    for r in rows:
        dominated = False
        for other in rows:
            if other is r:
                continue
            ge_acc = other.accuracy_pct >= r.accuracy_pct
            le_cr = other.mean_cr_pct <= r.mean_cr_pct
            strict = (other.accuracy_pct > r.accuracy_pct
                      or other.mean_cr_pct < r.mean_cr_pct)
            if ge_acc and le_cr and strict:
                dominated = True
                break
        if not dominated:
            kept.append(r)
    return kept


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

RESULTS_HEADER = ["trace_id", "policy", "M", "M_early", "cr", "answer", "correct"]
TABLE_HEADER = ["policy", "dataset", "accuracy_pct", "mean_tokens",
                "mean_cr_pct", "n"]


def write_results_csv(outcomes: list[ExitOutcome], correct: list[bool],
                      path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(RESULTS_HEADER)
        for o, c in zip(outcomes, correct):
            cr = "" if o.compression_rate is None else repr(o.compression_rate)
            m = "" if o.m is None else o.m
            w.writerow([o.trace_id, o.policy, m, o.m_early, cr, o.answer, int(c)])


def read_results_csv(path: str | os.PathLike) -> tuple[list[ExitOutcome], list[bool]]:
    outcomes, correct = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            outcomes.append(ExitOutcome(
                trace_id=row["trace_id"],
                policy=row["policy"],
                m_early=int(row["M_early"]),
                m=int(row["M"]) if row["M"] else None,
                compression_rate=float(row["cr"]) if row["cr"] else None,
                solution_text="",
                answer=row["answer"],
            ))
            correct.append(row["correct"] in ("1", "true", "True"))
    return outcomes, correct


def write_table_csv(rows: list[BenchmarkRow], path: str | os.PathLike) -> None:
    """Benchmark table with percentages at one decimal place."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(TABLE_HEADER)
        for r in rows:
            w.writerow([r.policy, r.dataset, f"{r.accuracy_pct:.1f}",
                        f"{r.mean_tokens:.1f}", f"{r.mean_cr_pct:.1f}", r.n])


def read_table_csv(path: str | os.PathLike) -> list[BenchmarkRow]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            rows.append(BenchmarkRow(
                policy=row["policy"], dataset=row["dataset"],
                accuracy_pct=float(row["accuracy_pct"]),
                mean_tokens=float(row["mean_tokens"]),
                mean_cr_pct=float(row["mean_cr_pct"]), n=int(row["n"])))
    return rows


def write_sweep_csv(rows, path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["fraction", "mean_accuracy", "mean_cr", "n"])
        for r in rows:
            w.writerow([repr(r.fraction), repr(r.mean_accuracy),
                        repr(r.mean_cr), r.n])


# ---------------------------------------------------------------------------
# SVG (non-contractual; fixed layout, no styling knobs)
# ---------------------------------------------------------------------------

_W, _H = 640, 480
_MARGIN = 60


def _scale(values: list[float]) -> tuple[float, float]:
    lo, hi = min(values), max(values)
    if hi == lo:
        lo, hi = lo - 1.0, hi + 1.0
    return lo, hi


def _project(x, lo, hi, out_lo, out_hi):
    return out_lo + (x - lo) / (hi - lo) * (out_hi - out_lo)


def svg_scatter(series: list[tuple[str, list[tuple[float, float]]]],
                title: str, xlabel: str, ylabel: str,
                connect: bool = False) -> str:
    """One fixed-size scatter (optionally connected) chart as an SVG string."""
    points = [p for _, pts in series for p in pts]
    if not points:
        raise EmptyResults("nothing to plot")
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    x_lo, x_hi = _scale(xs)
    y_lo, y_hi = _scale(ys)
    colors = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W / 2:.1f}" y="24" text-anchor="middle" '
        f'font-size="16">{escape(title)}</text>',
        f'<line x1="{_MARGIN}" y1="{_H - _MARGIN}" x2="{_W - _MARGIN}" '
        f'y2="{_H - _MARGIN}" stroke="black"/>',
        f'<line x1="{_MARGIN}" y1="{_MARGIN}" x2="{_MARGIN}" '
        f'y2="{_H - _MARGIN}" stroke="black"/>',
        f'<text x="{_W / 2:.1f}" y="{_H - 16}" text-anchor="middle" '
        f'font-size="12">{escape(xlabel)}</text>',
        f'<text x="18" y="{_H / 2:.1f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 18 {_H / 2:.1f})">{escape(ylabel)}</text>',
    ]
    for lo, hi, axis in ((x_lo, x_hi, "x"), (y_lo, y_hi, "y")):
        for frac in (0.0, 0.5, 1.0):
            val = lo + frac * (hi - lo)
            if axis == "x":
                px = _project(val, lo, hi, _MARGIN, _W - _MARGIN)
                parts.append(
                    f'<text x="{px:.1f}" y="{_H - _MARGIN + 18}" '
                    f'text-anchor="middle" font-size="10">{val:.3g}</text>')
            else:
                py = _project(val, lo, hi, _H - _MARGIN, _MARGIN)
                parts.append(
                    f'<text x="{_MARGIN - 8}" y="{py:.1f}" text-anchor="end" '
                    f'font-size="10">{val:.3g}</text>')
    for si, (label, pts) in enumerate(series):
        color = colors[si % len(colors)]
        coords = [
            (_project(x, x_lo, x_hi, _MARGIN, _W - _MARGIN),
             _project(y, y_lo, y_hi, _H - _MARGIN, _MARGIN))
            for x, y in pts
        ]
        if connect and len(coords) > 1:
            path = " ".join(f"{px:.1f},{py:.1f}" for px, py in coords)
            parts.append(f'<polyline points="{path}" fill="none" '
                         f'stroke="{color}" stroke-width="1.5"/>')
        for px, py in coords:
            parts.append(f'<circle cx="{px:.1f}" cy="{py:.1f}" r="3" '
                         f'fill="{color}"/>')
        parts.append(
            f'<text x="{_W - _MARGIN}" y="{_MARGIN + 14 * si}" text-anchor="end" '
            f'font-size="11" fill="{color}">{escape(label)}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def write_svg(svg: str, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(svg)
