"""Per-token binary exit probe: a linear or small tanh-MLP head over feature
vectors, trained with class-weighted binary cross-entropy and inverse-
frequency class weights, selected on holdout Macro-F1.

Training is plain mini-batch gradient descent with momentum so identical
seeds give bitwise-identical weights. Loss is normalized by the number of
masked-in positions rather than the full sequence length, so padding and
out-of-think positions never dilute the objective.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagic,
    DataError,
    DimMismatch,
    Diverged,
    EmptyMask,
    LengthMismatch,
    MissingClass,
    NonFiniteLoss,
    VersionMismatch,
)
from .traces import FeatureMatrix

OPXM_MAGIC = b"OPXM"
OPXM_VERSION = 1
_ARCH_TAGS = {"linear": 0, "mlp": 1}
_TAG_ARCHS = {v: k for k, v in _ARCH_TAGS.items()}
_EPS = 1e-12
MOMENTUM = 0.9


def expected_weight_count(arch: str, input_dim: int, hidden: tuple[int, ...]) -> int:
    if arch == "linear":
        return input_dim + 1
    total = 0
    dims = (input_dim, *hidden, 1)
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        total += fan_in * fan_out + fan_out
    return total


@dataclass
class ProbeModel:
    arch: str
    input_dim: int
    hidden: tuple[int, ...]
    weights: np.ndarray  # flat float64
    decision_threshold: float = 0.7

    def __post_init__(self):
        if self.arch not in _ARCH_TAGS:
            raise DataError(f"unknown arch {self.arch!r}")
        if self.arch == "linear" and self.hidden:
            raise DataError("linear probes take no hidden widths")
        if not 0.0 < self.decision_threshold < 1.0:
            raise DataError("decision threshold must be in (0, 1)")
        self.weights = np.asarray(self.weights, dtype=np.float64).ravel()
        expected = expected_weight_count(self.arch, self.input_dim, self.hidden)
        if self.weights.size != expected:
            raise DimMismatch(
                f"arch {self.arch} D={self.input_dim} hidden={self.hidden} "
                f"needs {expected} weights, got {self.weights.size}")

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """(W, b) pairs as views into the flat weight vector."""
        dims = (self.input_dim, *self.hidden, 1)
        out = []
        pos = 0
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            w = self.weights[pos:pos + fan_in * fan_out].reshape(fan_out, fan_in)
            pos += fan_in * fan_out
            b = self.weights[pos:pos + fan_out]
            pos += fan_out
            out.append((w, b))
        return out


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 256
    max_epochs: int = 200
    early_stop_patience: int = 25
    validation_fraction: float = 0.2
    seed: int = 7

    def __post_init__(self):
        if min(self.learning_rate, self.batch_size, self.max_epochs,
               self.early_stop_patience) <= 0:
            raise DataError("training hyperparameters must be positive")
        if not 0.0 < self.validation_fraction < 1.0:
            raise DataError("validation_fraction must be in (0, 1)")


@dataclass
class ClassWeights:
    w0: float
    w1: float


@dataclass
class TrainReport:
    epoch_losses: list[float] = field(default_factory=list)
    epoch_val_f1: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val_f1: float = 0.0
    class_weights: ClassWeights | None = None
    n_train_tokens: int = 0
    n_val_tokens: int = 0


def class_weights(n0: int, n1: int) -> ClassWeights:
    """Inverse-frequency weights; n0*w0 + n1*w1 = n0 + n1 by construction."""
    if n0 < 1 or n1 < 1:
        raise MissingClass(f"need both classes, got n0={n0}, n1={n1}")
    total = n0 + n1
    return ClassWeights(w0=total / (2.0 * n0), w1=total / (2.0 * n1))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _forward(model: ProbeModel, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Probabilities plus per-layer activations (inputs to each layer)."""
    acts = [x]
    a = x
    layer_list = model.layers()
    for w, b in layer_list[:-1]:
        a = np.tanh(a @ w.T + b)
        acts.append(a)
    w, b = layer_list[-1]
    z = (a @ w.T + b).ravel()
    return _sigmoid(z), acts


def predict(model: ProbeModel, feature_vector: np.ndarray) -> float:
    x = np.asarray(feature_vector, dtype=np.float64).ravel()
    if x.size != model.input_dim:
        raise DimMismatch(f"expected {model.input_dim} features, got {x.size}")
    p, _ = _forward(model, x.reshape(1, -1))
    return float(p[0])


def predict_batch(model: ProbeModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise DimMismatch(f"expected (n, {model.input_dim}), got {x.shape}")
    p, _ = _forward(model, x)
    return p


def _loss_and_grad(model: ProbeModel, x: np.ndarray, y: np.ndarray,
                   weights: ClassWeights) -> tuple[float, np.ndarray]:
    n = x.shape[0]
    p, acts = _forward(model, x)
    pc = np.clip(p, _EPS, 1.0 - _EPS)
    w0, w1 = weights.w0, weights.w1
    loss = -(np.sum(w1 * y * np.log(pc) + w0 * (1.0 - y) * np.log(1.0 - pc)) / n)
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"loss is {loss}")

    # d loss / d pre-sigmoid logit, per sample
    gz = -(w1 * y * (1.0 - p) - w0 * (1.0 - y) * p) / n
    grad = np.zeros_like(model.weights)
    dims = (model.input_dim, *model.hidden, 1)
    sizes = [(fi * fo, fo) for fi, fo in zip(dims[:-1], dims[1:])]
    offsets = []
    pos = 0
    for ws, bs in sizes:
        offsets.append((pos, pos + ws, pos + ws + bs))
        pos += ws + bs

    layer_list = model.layers()
    upstream = gz.reshape(-1, 1)  # (n, fan_out) of the layer being processed
    for li in range(len(layer_list) - 1, -1, -1):
        w, _b = layer_list[li]
        a_in = acts[li]
        w_lo, b_lo, b_hi = offsets[li]
        grad[w_lo:b_lo] = (upstream.T @ a_in).ravel()
        grad[b_lo:b_hi] = upstream.sum(axis=0)
        if li > 0:
            g_a = upstream @ w            # (n, fan_in)
            upstream = g_a * (1.0 - a_in ** 2)
    return float(loss), grad


def weighted_bce(model: ProbeModel, features: FeatureMatrix | np.ndarray,
                 labels, loss_mask, weights: ClassWeights) -> tuple[float, np.ndarray]:
    """Class-weighted BCE over the masked-in positions and its exact
    analytic gradient (same shape as the flat weight vector)."""
    x = features.values if isinstance(features, FeatureMatrix) else np.asarray(features)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64).ravel()
    mask = np.asarray(loss_mask, dtype=bool).ravel()
    if not (x.shape[0] == y.size == mask.size):
        raise LengthMismatch(
            f"features {x.shape[0]}, labels {y.size}, mask {mask.size}")
    if not mask.any():
        raise EmptyMask("loss mask selects no positions")
    return _loss_and_grad(model, x[mask], y[mask], weights)


def macro_f1(y_true, y_pred) -> float:
    """Unweighted mean of the per-class F1 for classes {0, 1}; a class absent
    from both sides counts as perfect, absent from one side as zero."""
    yt = np.asarray(y_true).ravel()
    yp = np.asarray(y_pred).ravel()
    if yt.size != yp.size or yt.size == 0:
        raise LengthMismatch(f"{yt.size} vs {yp.size}")
    scores = []
    for cls in (0, 1):
        t = yt == cls
        p = yp == cls
        if not t.any() and not p.any():
            scores.append(1.0)
            continue
        tp = float(np.sum(t & p))
        if tp == 0.0:
            scores.append(0.0)
            continue
        precision = tp / float(p.sum())
        recall = tp / float(t.sum())
        scores.append(2.0 * precision * recall / (precision + recall))
    return float(np.mean(scores))


def init_model(arch: str, input_dim: int, hidden: tuple[int, ...],
               rng: np.random.Generator, tau: float = 0.7) -> ProbeModel:
    n = expected_weight_count(arch, input_dim, hidden)
    if arch == "linear":
        weights = np.zeros(n, dtype=np.float64)
    else:
        weights = np.zeros(n, dtype=np.float64)
        dims = (input_dim, *hidden, 1)
        pos = 0
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            scale = 1.0 / np.sqrt(fan_in)
            weights[pos:pos + fan_in * fan_out] = rng.normal(
                0.0, scale, fan_in * fan_out)
            pos += fan_in * fan_out + fan_out  # biases stay zero
    return ProbeModel(arch=arch, input_dim=input_dim, hidden=tuple(hidden),
                      weights=weights, decision_threshold=tau)


def _flatten_split(dataset, indices) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = [], []
    for idx in indices:
        features, labels, mask = dataset[idx]
        x = features.values if isinstance(features, FeatureMatrix) else features
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(labels, dtype=np.float64).ravel()
        m = np.asarray(mask, dtype=bool).ravel()
        xs.append(x[m])
        ys.append(y[m])
    return np.concatenate(xs, axis=0), np.concatenate(ys, axis=0)


def train(dataset: list, config: TrainConfig, arch: str = "linear",
          hidden: tuple[int, ...] = (),
          tau: float = 0.7) -> tuple[ProbeModel, TrainReport]:
    """Train on (features, labels, loss_mask) triples, split by trace.

    Class weights come from the training split only; the checkpoint with the
    best validation Macro-F1 is returned even if training never improves.
    """
    if len(dataset) < 2:
        raise DataError("need at least 2 traces to split train/validation")
    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(len(dataset))
    n_val = max(1, int(round(config.validation_fraction * len(dataset))))
    if n_val >= len(dataset):
        n_val = len(dataset) - 1
    val_idx = sorted(perm[:n_val].tolist())
    train_idx = sorted(perm[n_val:].tolist())

    x_train, y_train = _flatten_split(dataset, train_idx)
    x_val, y_val = _flatten_split(dataset, val_idx)
    input_dim = x_train.shape[1]

    n1 = int(y_train.sum())
    weights = class_weights(len(y_train) - n1, n1)

    model = init_model(arch, input_dim, tuple(hidden), rng, tau)
    velocity = np.zeros_like(model.weights)
    report = TrainReport(class_weights=weights,
                         n_train_tokens=len(y_train), n_val_tokens=len(y_val))
    best_weights = model.weights.copy()
    best_f1 = -1.0
    since_best = 0

    n = len(y_train)
    for epoch in range(config.max_epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            loss, grad = _loss_and_grad(model, x_train[batch], y_train[batch],
                                        weights)
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise Diverged(f"epoch {epoch}: non-finite loss or gradient")
            velocity = MOMENTUM * velocity - config.learning_rate * grad
            model.weights += velocity

        epoch_loss, _ = _loss_and_grad(model, x_train, y_train, weights)
        if not np.isfinite(epoch_loss):
            raise Diverged(f"epoch {epoch}: non-finite loss")
        p_val = predict_batch(model, x_val)
        val_f1 = macro_f1(y_val.astype(int),
                          (p_val >= model.decision_threshold).astype(int))
        report.epoch_losses.append(epoch_loss)
        report.epoch_val_f1.append(val_f1)
        if val_f1 > best_f1:
            best_f1 = val_f1
            best_weights = model.weights.copy()
            report.best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.early_stop_patience:
                break

    report.best_val_f1 = best_f1
    model.weights[:] = best_weights
    return model, report


# ---------------------------------------------------------------------------
# Model file (OPXM)
# ---------------------------------------------------------------------------

def save_model(model: ProbeModel, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(OPXM_MAGIC)
        fh.write(struct.pack("<IB", OPXM_VERSION, _ARCH_TAGS[model.arch]))
        fh.write(struct.pack("<I", model.input_dim))
        fh.write(struct.pack("<I", len(model.hidden)))
        for h in model.hidden:
            fh.write(struct.pack("<I", h))
        fh.write(struct.pack("<d", model.decision_threshold))
        fh.write(np.asarray(model.weights, dtype="<f8").tobytes())


def load_model(path: str | os.PathLike) -> ProbeModel:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != OPXM_MAGIC:
            raise BadMagic(f"{path}: got {magic!r}")
        version, tag = struct.unpack("<IB", fh.read(5))
        if version != OPXM_VERSION:
            raise VersionMismatch(f"{path}: version {version}")
        if tag not in _TAG_ARCHS:
            raise DataError(f"{path}: unknown arch tag {tag}")
        input_dim, n_hidden = struct.unpack("<II", fh.read(8))
        hidden = struct.unpack(f"<{n_hidden}I", fh.read(4 * n_hidden)) if n_hidden else ()
        (tau,) = struct.unpack("<d", fh.read(8))
        payload = fh.read()
    arch = _TAG_ARCHS[tag]
    expected = expected_weight_count(arch, input_dim, tuple(hidden))
    if len(payload) != expected * 8:
        raise DataError(
            f"{path}: expected {expected} weights, found {len(payload) // 8}")
    weights = np.frombuffer(payload, dtype="<f8").copy()
    return ProbeModel(arch=arch, input_dim=input_dim, hidden=tuple(hidden),
                      weights=weights, decision_threshold=tau)
