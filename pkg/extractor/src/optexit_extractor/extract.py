"""Teacher-forced extraction of per-token hidden states and top-K logprobs.

For every trace the model is run once over prompt + CoT ids: the final-layer
hidden state at each CoT position becomes one sidecar row, and the logits at
the preceding position give that token's chosen logprob and top-K slice.
Re-encoding equality against the stored token ids is enforced before any
forward pass, since offline re-encoding only reproduces generation-time
states when the ids match.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .formats import (
    InputTrace,
    ModelLoad,
    TokenizationMismatch,
    read_input_traces,
    read_prompts,
    trace_record,
    write_sidecar,
    write_trace_records,
)


@dataclass
class ExtractorJob:
    model_id: str
    out_dir: str
    traces_path: str | None = None
    prompts_path: str | None = None
    k: int = 20
    device: str = "cpu"
    dtype: str = "float32"
    max_new_tokens: int = 64

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if (self.traces_path is None) == (self.prompts_path is None):
            raise ValueError("exactly one of traces_path or prompts_path")


@dataclass
class ExtractReport:
    rows: list[dict] = field(default_factory=list)

    def add(self, trace_id: str, status: str, detail: str = ""):
        self.rows.append({"trace_id": trace_id, "status": status,
                          "detail": detail})

    @property
    def succeeded(self) -> int:
        return sum(1 for r in self.rows if r["status"] == "ok")


_DTYPES = {"float32": torch.float32, "float64": torch.float64,
           "bfloat16": torch.bfloat16}


def load_runtime(job: ExtractorJob):
    from transformers import AutoModelForCausalLM, AutoTokenizer

    try:
        tokenizer = AutoTokenizer.from_pretrained(job.model_id)
        model = AutoModelForCausalLM.from_pretrained(
            job.model_id, dtype=_DTYPES.get(job.dtype, torch.float32))
    except Exception as exc:
        raise ModelLoad(f"{job.model_id}: {exc}") from exc
    model.to(job.device)
    model.eval()
    return model, tokenizer


def _encode(tokenizer, text: str) -> list[int]:
    return tokenizer.encode(text, add_special_tokens=False)


def _check_tokenization(tokenizer, trace: InputTrace) -> None:
    reencoded = _encode(tokenizer, "".join(trace.token_texts))
    for i, stored in enumerate(trace.token_ids):
        if i >= len(reencoded) or reencoded[i] != stored:
            raise TokenizationMismatch(trace.trace_id, i)
    if len(reencoded) != len(trace.token_ids):
        raise TokenizationMismatch(trace.trace_id, len(trace.token_ids))


def _context_ids(tokenizer, prompt: str) -> list[int]:
    ids = _encode(tokenizer, prompt)
    if ids:
        return ids
    if tokenizer.bos_token_id is not None:
        return [tokenizer.bos_token_id]
    raise ModelLoad("empty prompt and the tokenizer has no BOS token")


@torch.no_grad()
def _forward_trace(model, tokenizer, job: ExtractorJob, trace: InputTrace):
    """One pass over prompt + CoT; returns (hidden f32 (M, D), lps, topk)."""
    prompt_ids = _context_ids(tokenizer, trace.prompt)
    ids = prompt_ids + trace.token_ids
    x = torch.tensor([ids], dtype=torch.long, device=job.device)
    out = model(x, output_hidden_states=True)
    m = len(trace.token_ids)
    offset = len(prompt_ids)

    hidden = out.hidden_states[-1][0, offset:offset + m, :]
    hidden32 = hidden.to(torch.float32).cpu().numpy()

    # logits at position p-1 parameterize the distribution of the token at p
    logits = out.logits[0, offset - 1:offset + m - 1, :].to(torch.float64)
    logprobs = torch.log_softmax(logits, dim=-1)
    k = min(job.k, logprobs.shape[-1])
    top_vals, top_ids = torch.topk(logprobs, k=k, dim=-1)

    chosen, topk = [], []
    for i, tid in enumerate(trace.token_ids):
        chosen.append(float(logprobs[i, tid]))
        pairs = [(int(top_ids[i, j]), min(float(top_vals[i, j]), 0.0))
                 for j in range(k)]
        topk.append(pairs)
    return hidden32, chosen, topk


@torch.no_grad()
def _generate_trace(model, tokenizer, job: ExtractorJob, trace_id: str,
                    prompt: str) -> InputTrace:
    prompt_ids = _context_ids(tokenizer, prompt)
    x = torch.tensor([prompt_ids], dtype=torch.long, device=job.device)
    pad_id = tokenizer.pad_token_id
    if pad_id is None:
        pad_id = tokenizer.eos_token_id if tokenizer.eos_token_id is not None else 0
    generated = model.generate(
        x, max_new_tokens=job.max_new_tokens, do_sample=False,
        pad_token_id=pad_id)
    new_ids = generated[0, len(prompt_ids):].tolist()
    texts = [tokenizer.decode([tid]) for tid in new_ids]
    return InputTrace(trace_id=trace_id, prompt=prompt, source="generated",
                      model=job.model_id, token_ids=new_ids,
                      token_texts=texts)


def dump_features(job: ExtractorJob) -> ExtractReport:
    """Write one `<trace_id>.optx` per trace plus an updated trace file in
    input order; a tokenization mismatch drops that trace and is reported."""
    model, tokenizer = load_runtime(job)
    os.makedirs(job.out_dir, exist_ok=True)

    if job.traces_path is not None:
        inputs = read_input_traces(job.traces_path)
    else:
        inputs = [_generate_trace(model, tokenizer, job, tid, prompt)
                  for tid, prompt in read_prompts(job.prompts_path)]

    report = ExtractReport()
    records = []
    for trace in inputs:
        if not trace.token_ids:
            report.add(trace.trace_id, "empty", "no CoT tokens")
            continue
        try:
            _check_tokenization(tokenizer, trace)
        except TokenizationMismatch as exc:
            report.add(trace.trace_id, "tokenization_mismatch",
                       f"index {exc.index}")
            continue
        hidden, chosen, topk = _forward_trace(model, tokenizer, job, trace)
        write_sidecar(os.path.join(job.out_dir, f"{trace.trace_id}.optx"),
                      hidden)
        records.append(trace_record(trace, len(topk[0]), job.model_id,
                                    chosen, topk))
        report.add(trace.trace_id, "ok")

    write_trace_records(records, os.path.join(job.out_dir, "traces.jsonl"))
    return report
