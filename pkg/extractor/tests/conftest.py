from __future__ import annotations

import json

import pytest
import torch


CORPUS_LINES = [
    "the answer is 42 so we stop",
    "step one step two then check the result",
    "we compute the value and verify it now",
    "reasoning continues until the final answer arrives",
]


@pytest.fixture(scope="session")
def tiny_model_dir(tmp_path_factory) -> str:
    """A small byte-level-BPE tokenizer and random causal LM saved to disk,
    loadable through the standard auto classes."""
    from tokenizers import Tokenizer, decoders, models, pre_tokenizers, trainers
    from transformers import GPT2Config, GPT2LMHeadModel, PreTrainedTokenizerFast

    out = tmp_path_factory.mktemp("tiny-model")
    tok = Tokenizer(models.BPE())
    tok.pre_tokenizer = pre_tokenizers.ByteLevel(add_prefix_space=False)
    tok.decoder = decoders.ByteLevel()
    trainer = trainers.BpeTrainer(
        vocab_size=320, min_frequency=1, special_tokens=["<|pad|>"],
        initial_alphabet=pre_tokenizers.ByteLevel.alphabet())
    tok.train_from_iterator(CORPUS_LINES, trainer)
    fast = PreTrainedTokenizerFast(tokenizer_object=tok, pad_token="<|pad|>")
    fast.save_pretrained(out)

    torch.manual_seed(1234)
    config = GPT2Config(vocab_size=len(fast), n_positions=128, n_embd=32,
                        n_layer=2, n_head=2, bos_token_id=0, eos_token_id=0)
    model = GPT2LMHeadModel(config)
    model.save_pretrained(out)
    return str(out)


@pytest.fixture(scope="session")
def tokenizer(tiny_model_dir):
    from transformers import AutoTokenizer

    return AutoTokenizer.from_pretrained(tiny_model_dir)


def make_trace_file(path, tokenizer, cases: list[tuple[str, str, str]],
                    corrupt: dict[str, int] | None = None) -> dict[str, int]:
    """Write an extractor-input trace file; cases are (trace_id, prompt,
    cot_text). Returns trace_id -> M. corrupt maps trace_id to a token index
    whose id gets shifted to force a mismatch."""
    lengths = {}
    with open(path, "w", encoding="utf-8") as fh:
        for trace_id, prompt, cot_text in cases:
            ids = tokenizer.encode(cot_text, add_special_tokens=False)
            texts = [tokenizer.decode([t]) for t in ids]
            if corrupt and trace_id in corrupt:
                pos = corrupt[trace_id]
                ids = list(ids)
                ids[pos] = (ids[pos] + 1) % len(tokenizer)
            lengths[trace_id] = len(ids)
            obj = {
                "trace_id": trace_id,
                "prompt": prompt,
                "source": "unit",
                "model": "tiny",
                "k": 5,
                "solution_text": "",
                "final_answer": None,
                "cot_tokens": [
                    {"i": i, "id": tid, "text": txt, "lp": 0.0, "topk": []}
                    for i, (tid, txt) in enumerate(zip(ids, texts))
                ],
            }
            fh.write(json.dumps(obj) + "\n")
    return lengths
