from __future__ import annotations

import math

import pytest

from optexit.traces import TokenRecord, TopKEntry, Trace


def flat_topk(k: int, lp: float) -> list[TopKEntry]:
    return [TopKEntry(token_id=100 + j, logprob=lp) for j in range(k)]


def peaked_topk(k: int, top_lp: float, rest_lp: float) -> list[TopKEntry]:
    return [TopKEntry(token_id=100, logprob=top_lp)] + [
        TopKEntry(token_id=101 + j, logprob=rest_lp) for j in range(k - 1)
    ]


def make_token(index: int, text: str, lp: float = -0.5,
               topk: list[TopKEntry] | None = None, k: int = 4) -> TokenRecord:
    return TokenRecord(
        index=index,
        token_id=1000 + index,
        token_text=text,
        chosen_logprob=lp,
        top_k=topk if topk is not None else flat_topk(k, lp),
    )


def make_trace(trace_id: str, texts: list[str], k: int = 4,
               prompt: str = "p", source: str = "unit", model: str = "mock",
               solution_text: str = "", final_answer: str | None = None,
               lps: list[float] | None = None) -> Trace:
    tokens = []
    for i, text in enumerate(texts):
        lp = lps[i] if lps is not None else -0.5
        tokens.append(make_token(i, text, lp=lp, k=k))
    return Trace(trace_id=trace_id, prompt=prompt, source=source, model=model,
                 k=k, solution_text=solution_text, final_answer=final_answer,
                 cot_tokens=tokens)


def reference_exit_index(bits: list[int], window: int, majority_min: int,
                         require_full_window: bool = True) -> int | None:
    """Independent statement of the exit rule, via array slicing."""
    for t in range(1, len(bits) + 1):
        w = bits[max(0, t - window):t]
        if (len(w) == window or not require_full_window) and sum(w) >= majority_min:
            return t
    return None


@pytest.fixture
def served():
    """Factory that serves a MockScript and tears it down afterwards."""
    from optexit.mockserver import mock_serve

    handles = []

    def _serve(script):
        handle = mock_serve(script, port=0)
        handles.append(handle)
        return handle

    yield _serve
    for h in handles:
        h.stop()


def ln(x: float) -> float:
    return math.log(x)


def separable_dataset(n_traces: int = 200, tokens_per: int = 15, dim: int = 4,
                      margin: float = 1.0, seed: int = 13):
    """Synthetic probe-training data: label 1 iff feature 0 is positive, with
    |feature 0| >= margin; remaining dims are noise."""
    import numpy as np

    rng = np.random.default_rng(seed)
    dataset = []
    for _ in range(n_traces):
        signs = rng.choice([-1.0, 1.0], size=tokens_per)
        f0 = signs * rng.uniform(margin, 2.0 * margin, size=tokens_per)
        rest = rng.normal(0.0, 1.0, size=(tokens_per, dim - 1))
        features = np.column_stack([f0, rest])
        labels = (f0 > 0).astype(int).tolist()
        dataset.append((features, labels, [1] * tokens_per))
    return dataset


def fd_gradient(model, x, y, weights, h: float = 1e-6):
    """Central-difference gradient of the weighted BCE wrt every weight."""
    import numpy as np

    from optexit.probe import weighted_bce

    grad = np.zeros_like(model.weights)
    mask = [1] * len(y)
    for i in range(model.weights.size):
        orig = model.weights[i]
        model.weights[i] = orig + h
        up, _ = weighted_bce(model, x, y, mask, weights)
        model.weights[i] = orig - h
        down, _ = weighted_bce(model, x, y, mask, weights)
        model.weights[i] = orig
        grad[i] = (up - down) / (2.0 * h)
    return grad
