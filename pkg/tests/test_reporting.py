from __future__ import annotations

import xml.etree.ElementTree as ET

import pytest

from optexit.controller import ExitOutcome
from optexit.errors import EmptyResults, MixedDatasets
from optexit.reporting import (
    BenchmarkRow,
    pareto,
    read_results_csv,
    read_table_csv,
    report,
    svg_scatter,
    write_results_csv,
    write_table_csv,
)


def _outcome(tid: str, policy: str, cr: float | None, m: int = 100) -> ExitOutcome:
    m_early = round(cr * m) if cr is not None else m
    return ExitOutcome(trace_id=tid, policy=policy, m_early=m_early, m=m,
                       compression_rate=cr, solution_text="", answer="a")


class TestReport:
    def test_accuracy_and_mean_cr(self):
        outcomes = [_outcome(f"t{i}", "optexit", cr)
                    for i, cr in enumerate([0.2, 0.4, 0.6, 0.8])]
        rows = report(outcomes, [True, True, True, False])
        assert len(rows) == 1
        row = rows[0]
        assert row.accuracy_pct == pytest.approx(75.0)
        assert row.mean_cr_pct == pytest.approx(50.0)
        assert row.n == 4

    def test_single_vanilla(self):
        rows = report([_outcome("t0", "vanilla", 1.0)], [True])
        assert rows[0].mean_cr_pct == pytest.approx(100.0)

    def test_grouped_by_policy_and_dataset(self):
        outcomes = [_outcome("a", "vanilla", 1.0), _outcome("b", "deer", 0.5),
                    _outcome("c", "deer", 0.7)]
        dataset_of = {"a": "math", "b": "math", "c": "code"}
        rows = report(outcomes, [True, True, False], dataset_of=dataset_of)
        keys = [(r.policy, r.dataset) for r in rows]
        assert keys == [("deer", "code"), ("deer", "math"), ("vanilla", "math")]
        assert sum(r.n for r in rows) == 3

    def test_empty(self):
        with pytest.raises(EmptyResults):
            report([], [])


def _row(policy: str, acc: float, cr: float, dataset: str = "d") -> BenchmarkRow:
    return BenchmarkRow(policy=policy, dataset=dataset, accuracy_pct=acc,
                        mean_tokens=100.0, mean_cr_pct=cr, n=10)


class TestPareto:
    def test_single_dominator(self):
        rows = [_row("a", 90, 45), _row("b", 70, 86), _row("c", 62, 49)]
        frontier = pareto(rows)
        assert [r.policy for r in frontier] == ["a"]

    def test_identical_rows_both_kept(self):
        rows = [_row("a", 80, 50), _row("b", 80, 50)]
        assert len(pareto(rows)) == 2

    def test_single_row(self):
        rows = [_row("a", 80, 50)]
        assert pareto(rows) == rows

    def test_idempotent(self):
        rows = [_row("a", 90, 45), _row("b", 95, 60), _row("c", 70, 40),
                _row("d", 60, 80)]
        frontier = pareto(rows)
        assert pareto(frontier) == frontier

    def test_mixed_datasets_rejected(self):
        with pytest.raises(MixedDatasets):
            pareto([_row("a", 90, 45, "x"), _row("b", 80, 50, "y")])


class TestCsv:
    def test_results_round_trip(self, tmp_path):
        outcomes = [_outcome("t1", "optexit", 0.25), _outcome("t2", "vanilla", 1.0)]
        path = tmp_path / "r.csv"
        write_results_csv(outcomes, [True, False], path)
        loaded, correct = read_results_csv(path)
        assert [o.trace_id for o in loaded] == ["t1", "t2"]
        assert loaded[0].compression_rate == pytest.approx(0.25)
        assert correct == [True, False]
        header = path.read_text().splitlines()[0]
        assert header == "trace_id,policy,M,M_early,cr,answer,correct"

    def test_table_one_decimal(self, tmp_path):
        rows = [_row("a", 90.666, 45.123)]
        path = tmp_path / "t.csv"
        write_table_csv(rows, path)
        line = path.read_text().splitlines()[1]
        assert line == "a,d,90.7,100.0,45.1,10"
        loaded = read_table_csv(path)
        assert loaded[0].accuracy_pct == pytest.approx(90.7)


class TestSvg:
    def test_well_formed_xml(self):
        svg = svg_scatter([("one", [(1.0, 2.0), (3.0, 4.0)]),
                           ("two", [(2.0, 1.0)])],
                          "title <x>", "cr", "acc", connect=True)
        root = ET.fromstring(svg)
        assert root.tag.endswith("svg")

    def test_degenerate_single_point(self):
        svg = svg_scatter([("p", [(1.0, 1.0)])], "t", "x", "y")
        ET.fromstring(svg)

    def test_empty_rejected(self):
        with pytest.raises(EmptyResults):
            svg_scatter([("p", [])], "t", "x", "y")
