from __future__ import annotations

import csv
import json
import os

import numpy as np
import pytest
import torch

from optexit_extractor.cli import main
from optexit_extractor.extract import ExtractorJob, dump_features
from optexit_extractor.formats import (
    InputError,
    ModelLoad,
    read_input_traces,
    write_sidecar,
)

from conftest import make_trace_file


class TestJobValidation:
    def test_needs_exactly_one_input(self, tmp_path):
        with pytest.raises(ValueError):
            ExtractorJob(model_id="x", out_dir=str(tmp_path))
        with pytest.raises(ValueError):
            ExtractorJob(model_id="x", out_dir=str(tmp_path),
                         traces_path="a", prompts_path="b")

    def test_bad_model_path(self, tmp_path):
        traces = tmp_path / "in.jsonl"
        traces.write_text("")
        job = ExtractorJob(model_id=str(tmp_path / "no-model"),
                           out_dir=str(tmp_path / "out"),
                           traces_path=str(traces))
        with pytest.raises(ModelLoad):
            dump_features(job)


class TestTracesMode:
    def test_shapes_and_finiteness(self, tiny_model_dir, tokenizer, tmp_path):
        traces = tmp_path / "in.jsonl"
        lengths = make_trace_file(traces, tokenizer, [
            ("tr-a", "Q: add. ", "the answer is 42"),
            ("tr-b", "Q: verify. ", "step one step two then check"),
        ])
        job = ExtractorJob(model_id=tiny_model_dir, out_dir=str(tmp_path / "o"),
                           traces_path=str(traces), k=5)
        report = dump_features(job)
        assert report.succeeded == 2
        for tid, m in lengths.items():
            raw = (tmp_path / "o" / f"{tid}.optx").read_bytes()
            assert raw[:4] == b"OPTX"
            rows = int.from_bytes(raw[8:12], "little")
            dim = int.from_bytes(raw[12:16], "little")
            assert rows == m and dim == 32
            values = np.frombuffer(raw[16:], dtype="<f4")
            assert values.size == rows * dim
            assert np.all(np.isfinite(values))

    def test_hidden_states_match_direct_forward(self, tiny_model_dir,
                                                tokenizer, tmp_path):
        from transformers import AutoModelForCausalLM

        prompt, cot = "Q: go. ", "we compute the value"
        traces = tmp_path / "in.jsonl"
        make_trace_file(traces, tokenizer, [("tr-h", prompt, cot)])
        out_dir = tmp_path / "o"
        job = ExtractorJob(model_id=tiny_model_dir, out_dir=str(out_dir),
                           traces_path=str(traces), k=3)
        dump_features(job)

        model = AutoModelForCausalLM.from_pretrained(tiny_model_dir)
        model.eval()
        prompt_ids = tokenizer.encode(prompt, add_special_tokens=False)
        cot_ids = tokenizer.encode(cot, add_special_tokens=False)
        with torch.no_grad():
            out = model(torch.tensor([prompt_ids + cot_ids]),
                        output_hidden_states=True)
        expected = out.hidden_states[-1][0, len(prompt_ids):, :].to(
            torch.float32).numpy()
        raw = (out_dir / "tr-h.optx").read_bytes()
        values = np.frombuffer(raw[16:], dtype="<f4").reshape(len(cot_ids), 32)
        assert np.array_equal(values, expected)

        # chosen logprob of token i comes from the logits one position back
        logprobs = torch.log_softmax(out.logits[0].to(torch.float64), dim=-1)
        record = json.loads((out_dir / "traces.jsonl").read_text())
        first_lp = record["cot_tokens"][0]["lp"]
        manual = float(logprobs[len(prompt_ids) - 1, cot_ids[0]])
        assert first_lp == pytest.approx(manual, abs=1e-12)

    def test_topk_sorted_and_bounded(self, tiny_model_dir, tokenizer, tmp_path):
        traces = tmp_path / "in.jsonl"
        make_trace_file(traces, tokenizer, [("tr-k", "Q ", "then check")])
        job = ExtractorJob(model_id=tiny_model_dir, out_dir=str(tmp_path / "o"),
                           traces_path=str(traces), k=7)
        dump_features(job)
        record = json.loads((tmp_path / "o" / "traces.jsonl").read_text())
        assert record["k"] == 7
        for tok in record["cot_tokens"]:
            lps = [lp for _, lp in tok["topk"]]
            assert len(lps) == 7
            assert all(lp <= 0.0 for lp in lps)
            assert lps == sorted(lps, reverse=True)

    def test_tokenization_mismatch_drops_trace(self, tiny_model_dir,
                                               tokenizer, tmp_path):
        traces = tmp_path / "in.jsonl"
        make_trace_file(traces, tokenizer, [
            ("tr-good", "Q ", "the answer is 42"),
            ("tr-bad", "Q ", "step one step two then check"),
        ], corrupt={"tr-bad": 3})
        out_dir = tmp_path / "o"
        job = ExtractorJob(model_id=tiny_model_dir, out_dir=str(out_dir),
                           traces_path=str(traces), k=4)
        report = dump_features(job)
        statuses = {r["trace_id"]: r for r in report.rows}
        assert statuses["tr-good"]["status"] == "ok"
        assert statuses["tr-bad"]["status"] == "tokenization_mismatch"
        assert statuses["tr-bad"]["detail"] == "index 3"
        assert not (out_dir / "tr-bad.optx").exists()
        assert (out_dir / "tr-good.optx").exists()


class TestPromptsMode:
    def test_greedy_generation_emits_traces(self, tiny_model_dir, tmp_path):
        prompts = tmp_path / "p.jsonl"
        prompts.write_text(json.dumps(
            {"trace_id": "g1", "prompt": "the answer"}) + "\n")
        job = ExtractorJob(model_id=tiny_model_dir, out_dir=str(tmp_path / "o"),
                           prompts_path=str(prompts), k=4, max_new_tokens=10)
        report = dump_features(job)
        assert report.succeeded == 1
        record = json.loads((tmp_path / "o" / "traces.jsonl").read_text())
        assert len(record["cot_tokens"]) == 10
        assert record["source"] == "generated"


class TestCli:
    def test_end_to_end(self, tiny_model_dir, tokenizer, tmp_path):
        traces = tmp_path / "in.jsonl"
        make_trace_file(traces, tokenizer, [("c1", "Q ", "verify it now")])
        out_dir = tmp_path / "cli-out"
        code = main(["--model", tiny_model_dir, "--traces", str(traces),
                     "--k", "5", "--out", str(out_dir)])
        assert code == 0
        with open(out_dir / "report.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert rows[0]["status"] == "ok"
        assert (out_dir / "c1.optx").exists()

    def test_missing_input_file(self, tiny_model_dir, tmp_path):
        code = main(["--model", tiny_model_dir,
                     "--traces", str(tmp_path / "nope.jsonl"),
                     "--out", str(tmp_path / "o")])
        assert code == 2


class TestInputReader:
    def test_duplicate_ids_rejected(self, tmp_path):
        path = tmp_path / "d.jsonl"
        line = json.dumps({"trace_id": "x", "prompt": "p",
                           "cot_tokens": [{"id": 1, "text": "a"}]})
        path.write_text(line + "\n" + line + "\n")
        with pytest.raises(InputError):
            read_input_traces(path)

    def test_sidecar_writer_rejects_bad_shape(self, tmp_path):
        with pytest.raises(InputError):
            write_sidecar(tmp_path / "x.optx", np.zeros(5, dtype=np.float32))
