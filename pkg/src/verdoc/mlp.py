"""Dense ReLU network with softmax output, written directly against numpy.

Class 0 is benign and class 1 is malicious.  Everything is float64.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import CorruptModelFile, DimensionMismatch, NonFiniteWeights

BENIGN, MALICIOUS = 0, 1
PROB_FLOOR = 1e-12

_MAGIC = b"VDMLP\x00"
_VERSION = 1


@dataclass
class MlpModel:
    weights: list  # each (out, in)
    biases: list  # each (out,)

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        if not self.weights:
            raise ValueError("a model needs at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise DimensionMismatch(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise DimensionMismatch(f"layer {i} expects {w.shape[1]} inputs, "
                                        f"previous layer gives {self.weights[i - 1].shape[0]}")
        if self.weights[-1].shape[0] != 2:
            raise DimensionMismatch("the output layer must have exactly 2 classes")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def layers(self):
        return list(zip(self.weights, self.biases))

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MlpModel":
        return MlpModel([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def check_finite(self):
        if not all(np.isfinite(p).all() for p in self.params()):
            raise NonFiniteWeights("model holds NaN or infinite parameters")


def init_model(input_dim: int, hidden=(200, 200), seed: int = 0) -> MlpModel:
    """Glorot-uniform weights and zero biases."""
    rng = np.random.default_rng(seed)
    sizes = [input_dim, *hidden, 2]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-a, a, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpModel(weights, biases)


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 50
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    rng_seed: int = 0
    hidden: tuple = (200, 200)
    bound_method: str = "symbolic"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if min(self.epochs, self.batch_size) <= 0 or self.learning_rate <= 0:
            raise ValueError("epochs, batch_size and learning_rate must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1 and self.eps > 0):
            raise ValueError("Adam parameters out of range")
        if self.bound_method not in ("symbolic", "naive"):
            raise ValueError("bound_method must be 'symbolic' or 'naive'")

    def to_json(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def _as_batch(model: MlpModel, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = x.reshape(1, -1) if single else x
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise DimensionMismatch(f"input of shape {x.shape}, model expects {model.input_dim} features")
    return x, single


def logits_of(model: MlpModel, X: np.ndarray) -> np.ndarray:
    """Batched logits without validation (hot path)."""
    h = X
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        h = h @ w.T + b
        if i < last:
            h = np.maximum(h, 0.0)
    return h


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward(model: MlpModel, x) -> tuple[np.ndarray, np.ndarray]:
    """Logits and class probabilities for one vector or a batch of rows."""
    model.check_finite()
    X, single = _as_batch(model, x)
    z = logits_of(model, X)
    p = softmax(z)
    return (z[0], p[0]) if single else (z, p)


def loss_ce(probs, y) -> float | np.ndarray:
    """Cross-entropy with the probability clamped from below at ``PROB_FLOOR``."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim == 1:
        return float(-np.log(max(probs[int(y)], PROB_FLOOR)))
    y = np.asarray(y, dtype=np.int64)
    return -np.log(np.maximum(probs[np.arange(len(y)), y], PROB_FLOOR))


def ce_from_logits(z: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row loss and its gradient with respect to the logits.

    Computed through a stable log-softmax without the probability floor: the
    floor's flat region would zero the gradient of badly misclassified rows,
    which is exactly where worst-case training starts.
    """
    shifted = z - z.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    rows = np.arange(len(y))
    g = np.exp(logp)
    g[rows, y] -= 1.0
    return -logp[rows, y], g


@dataclass
class Gradients:
    weights: list
    biases: list
    inputs: np.ndarray
    loss: float

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


def backward_from_logit_grad(model: MlpModel, X: np.ndarray, dz: np.ndarray):
    """Backpropagate ``dz`` (rows of dL/dlogits) through the network."""
    acts = [X]
    pre = []
    h = X
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        a = h @ w.T + b
        pre.append(a)
        h = np.maximum(a, 0.0) if i < last else a
        acts.append(h)
    gw = [None] * len(model.weights)
    gb = [None] * len(model.weights)
    g = dz
    for i in range(last, -1, -1):
        gw[i] = g.T @ acts[i]
        gb[i] = g.sum(axis=0)
        g = g @ model.weights[i]
        if i > 0:
            g = g * (pre[i - 1] > 0)
    return gw, gb, g


def backward(model: MlpModel, x, y) -> Gradients:
    """Gradients of the mean cross-entropy over the given rows."""
    X, single = _as_batch(model, x)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if len(y) != len(X):
        raise DimensionMismatch("one label per input row is required")
    z = logits_of(model, X)
    loss, dz = ce_from_logits(z, y)
    n = len(X)
    gw, gb, gx = backward_from_logit_grad(model, X, dz / n)
    return Gradients(gw, gb, gx[0] if single else gx, float(loss.mean()))


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, model: MlpModel) -> "AdamState":
        return cls([np.zeros_like(p) for p in model.params()], [np.zeros_like(p) for p in model.params()])


def adam_step(model: MlpModel, grads, state: AdamState, cfg: TrainConfig) -> tuple[MlpModel, AdamState]:
    """One bias-corrected Adam update; returns a new model and state."""
    g_list = grads.params() if isinstance(grads, Gradients) else list(grads)
    if len(g_list) != len(state.m) or any(g.shape != m.shape for g, m in zip(g_list, state.m)):
        raise DimensionMismatch("gradient shapes do not match the optimizer state")
    t = state.t + 1
    b1, b2 = cfg.beta1, cfg.beta2
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(model.params(), g_list, state.m, state.v):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_params.append(p - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps))
        new_m.append(m)
        new_v.append(v)
    return MlpModel(new_params[0::2], new_params[1::2]), AdamState(new_m, new_v, t)


def predict(model: MlpModel, x) -> np.ndarray | int:
    """1 (malicious) iff the malicious logit is strictly larger; ties go to benign."""
    X, single = _as_batch(model, x)
    z = logits_of(model, X)
    out = (z[:, 1] > z[:, 0]).astype(np.int64)
    return int(out[0]) if single else out


def fitness_score(model: MlpModel, x) -> float | np.ndarray:
    """log p(benign) - log p(malicious); non-negative means the input evades."""
    X, single = _as_batch(model, x)
    z = logits_of(model, X)
    f = z[:, 0] - z[:, 1]
    return float(f[0]) if single else f


# -- serialization -----------------------------------------------------------


def save_model(model: MlpModel) -> bytes:
    out = bytearray(_MAGIC)
    out += struct.pack("<HI", _VERSION, len(model.weights))
    for w in model.weights:
        out += struct.pack("<II", *w.shape)
    for w, b in zip(model.weights, model.biases):
        out += np.ascontiguousarray(w, dtype="<f8").tobytes()
        out += np.ascontiguousarray(b, dtype="<f8").tobytes()
    return bytes(out)


def load_model(data: bytes) -> MlpModel:
    if not data.startswith(_MAGIC):
        raise CorruptModelFile("bad magic")
    pos = len(_MAGIC)
    try:
        version, n_layers = struct.unpack_from("<HI", data, pos)
        if version != _VERSION:
            raise CorruptModelFile(f"unsupported model file version {version}")
        pos += 6
        shapes = []
        for _ in range(n_layers):
            shapes.append(struct.unpack_from("<II", data, pos))
            pos += 8
        weights, biases = [], []
        for rows, cols in shapes:
            w = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=pos).reshape(rows, cols)
            pos += 8 * rows * cols
            b = np.frombuffer(data, dtype="<f8", count=rows, offset=pos)
            pos += 8 * rows
            weights.append(w.astype(np.float64))
            biases.append(b.astype(np.float64))
    except (struct.error, ValueError) as exc:
        raise CorruptModelFile(f"truncated model file: {exc}") from exc
    if pos != len(data):
        raise CorruptModelFile("trailing bytes after the last layer")
    try:
        return MlpModel(weights, biases)
    except (DimensionMismatch, ValueError) as exc:
        raise CorruptModelFile(str(exc)) from exc


def model_metadata(model: MlpModel, vocab_digest: str = "", cfg: TrainConfig | None = None, **extra) -> str:
    meta = {
        "format_version": _VERSION,
        "layer_shapes": [list(w.shape) for w in model.weights],
        "vocab_digest": vocab_digest,
        "train_config": cfg.to_json() if cfg else None,
        **extra,
    }
    return json.dumps(meta, sort_keys=True, indent=1)
