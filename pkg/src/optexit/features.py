"""Per-token feature providers for the probe.

Two providers: `logprob` derives a 4-dim vector from information any
logprobs-capable endpoint already returns, so the whole pipeline runs with
API-only access; `sidecar` reads true hidden states dumped to OPTX files.
Only the former can run against a live stream.
"""

from __future__ import annotations

import os

import numpy as np

from .analysis import token_confidence
from .errors import FeatureUnavailable, MissingFile, UsageError
from .traces import FeatureMatrix, TokenRecord, Trace, attach_features, sidecar_path

EMA_ALPHA = 0.1


class LogprobFeatures:
    """[token confidence, chosen logprob, top1-top2 margin, confidence EMA]."""

    name = "logprob"
    online = True
    dim = 4

    def session(self) -> "LogprobSession":
        return LogprobSession()

    def for_trace(self, trace: Trace) -> FeatureMatrix:
        sess = self.session()
        rows = [sess.step(tok) for tok in trace.cot_tokens]
        values = np.asarray(rows, dtype=np.float32)
        return FeatureMatrix(trace_id=trace.trace_id, rows=trace.m,
                             dim=self.dim, values=values)


class LogprobSession:
    def __init__(self):
        self._ema: float | None = None

    def step(self, record: TokenRecord) -> np.ndarray:
        conf = token_confidence(record)
        margin = 0.0
        if len(record.top_k) >= 2:
            margin = record.top_k[0].logprob - record.top_k[1].logprob
        if self._ema is None:
            self._ema = conf
        else:
            self._ema = EMA_ALPHA * conf + (1.0 - EMA_ALPHA) * self._ema
        return np.array([conf, record.chosen_logprob, margin, self._ema],
                        dtype=np.float64)


class SidecarFeatures:
    """Hidden-state features from `<trace_id>.optx` files in a directory."""

    name = "sidecar"
    online = False

    def __init__(self, directory: str):
        if not os.path.isdir(directory):
            raise MissingFile(directory)
        self.directory = directory
        self.dim: int | None = None

    def session(self):
        raise FeatureUnavailable(
            "sidecar features are precomputed; they cannot follow a live stream")

    def for_trace(self, trace: Trace) -> FeatureMatrix:
        fm = attach_features(trace, sidecar_path(self.directory, trace.trace_id))
        if self.dim is None:
            self.dim = fm.dim
        return fm


def make_provider(kind: str, sidecar_dir: str | None = None):
    if kind == "logprob":
        return LogprobFeatures()
    if kind == "sidecar":
        if not sidecar_dir:
            raise UsageError("sidecar features need --sidecar-dir")
        return SidecarFeatures(sidecar_dir)
    raise UsageError(f"unknown feature provider {kind!r}")
