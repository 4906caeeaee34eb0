"""Training loops and evaluation metrics."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NoRegions
from .featurespace import Vocabulary
from .mlp import (MALICIOUS, AdamState, MlpModel, TrainConfig, adam_step, backward, init_model,
                  logits_of, ce_from_logits)
from .mlp import predict as mlp_predict
from .properties import PropertySpec, region_arrays
from .verify import robust_loss

log = logging.getLogger(__name__)


@dataclass
class Dataset:
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    ids_train: list = field(default_factory=list)
    ids_test: list = field(default_factory=list)

    def __post_init__(self):
        for name in ("y_train", "y_test"):
            y = np.asarray(getattr(self, name), dtype=np.int64)
            if not np.isin(y, (0, 1)).all():
                raise ValueError("labels must be 0 (benign) or 1 (malicious)")
            setattr(self, name, y)
        self.X_train = np.asarray(self.X_train, dtype=np.uint8)
        self.X_test = np.asarray(self.X_test, dtype=np.uint8)
        self.ids_train = list(self.ids_train) or [f"train{i}" for i in range(len(self.X_train))]
        self.ids_test = list(self.ids_test) or [f"test{i}" for i in range(len(self.X_test))]
        if set(self.ids_train) & set(self.ids_test):
            raise ValueError("train and test splits overlap")

    @property
    def malicious_test(self) -> np.ndarray:
        return self.X_test[self.y_test == MALICIOUS]

    @property
    def malicious_test_ids(self) -> list:
        return [i for i, y in zip(self.ids_test, self.y_test) if y == MALICIOUS]

    @classmethod
    def split(cls, X, y, ids, test_fraction: float = 0.3, seed: int = 0) -> "Dataset":
        """Seeded split that keeps the class ratio in both halves."""
        X, y = np.asarray(X), np.asarray(y)
        rng = np.random.default_rng(seed)
        test = np.zeros(len(y), bool)
        for label in (0, 1):
            members = np.flatnonzero(y == label)
            members = members[rng.permutation(len(members))]
            test[members[:int(round(test_fraction * len(members)))]] = True
        ids = list(ids)
        return cls(X[~test], y[~test], X[test], y[test],
                   [ids[i] for i in np.flatnonzero(~test)], [ids[i] for i in np.flatnonzero(test)])


def _batches(rng, n: int, size: int) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


def fit_arrays(X, y, cfg: TrainConfig, model: MlpModel | None = None,
               history: list | None = None) -> MlpModel:
    """Plain cross-entropy training with Adam."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(X) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(cfg.rng_seed)
    model = model or init_model(X.shape[1], cfg.hidden, cfg.rng_seed)
    state = AdamState.zeros_like(model)
    for epoch in range(cfg.epochs):
        losses = []
        for b in _batches(rng, len(X), cfg.batch_size):
            g = backward(model, X[b], y[b])
            model, state = adam_step(model, g, state, cfg)
            losses.append(g.loss)
        if history is not None:
            history.append({"epoch": epoch, "regular": float(np.mean(losses))})
        log.debug("epoch %d loss %.5f", epoch, np.mean(losses))
    return model


def train_regular(dataset: Dataset, cfg: TrainConfig, history: list | None = None) -> MlpModel:
    return fit_arrays(dataset.X_train, dataset.y_train, cfg, history=history)


def _region_table(X: np.ndarray, vocab: Vocabulary, spec: PropertySpec):
    """Per sample: its seed point followed by every region of ``spec``."""
    table = []
    for x in X:
        lo, up = region_arrays(x, vocab, spec)
        table.append((np.concatenate([x[None], lo]), np.concatenate([x[None], up])))
    return table


def _gather(table, rows):
    lowers, uppers, owner = [], [], []
    for k, i in enumerate(rows):
        lo, up = table[i]
        lowers.append(lo)
        uppers.append(up)
        owner += [k] * len(lo)
    return np.concatenate(lowers), np.concatenate(uppers), np.array(owner)


def combined_loss(model: MlpModel, X, y, lower, upper, owner, method: str = "symbolic"):
    """Regular loss on (X, y) plus robust loss on the regions, with unit weights."""
    z = logits_of(model, np.asarray(X, dtype=np.float64))
    reg, _ = ce_from_logits(z, np.asarray(y, dtype=np.int64))
    rob = robust_loss(model, lower, upper, np.full(len(lower), MALICIOUS), owner, method, grad=False)
    return float(reg.mean()) + rob.loss, float(reg.mean()), rob.loss


def train_robust(dataset: Dataset, specs: Sequence[PropertySpec], cfg: TrainConfig, vocab: Vocabulary,
                 history: list | None = None) -> MlpModel:
    """Mixed training: each epoch visits every sample once in the regular stream and
    every malicious sample once in each property's robust stream; the batches of
    all streams are interleaved in a seeded random order."""
    if not specs:
        raise ValueError("at least one property is required")
    X = np.asarray(dataset.X_train, dtype=np.float64)
    y = dataset.y_train
    mal = np.flatnonzero(y == MALICIOUS)
    tables = [_region_table(dataset.X_train[mal], vocab, s) for s in specs]
    if all(sum(len(lo) - 1 for lo, _ in t) == 0 for t in tables):
        raise NoRegions("no property yields a region for any malicious training sample")
    rng = np.random.default_rng(cfg.rng_seed)
    model = init_model(X.shape[1], cfg.hidden, cfg.rng_seed)
    state = AdamState.zeros_like(model)
    for epoch in range(cfg.epochs):
        plan = [(-1, b) for b in _batches(rng, len(X), cfg.batch_size)]
        for s in range(len(specs)):
            plan += [(s, b) for b in _batches(rng, len(mal), cfg.batch_size)]
        plan = [plan[i] for i in rng.permutation(len(plan))]
        sums = np.zeros(len(specs) + 1)
        counts = np.zeros(len(specs) + 1)
        for stream, b in plan:
            if stream < 0:
                g = backward(model, X[b], y[b])
                model, state = adam_step(model, g, state, cfg)
                loss = g.loss
            else:
                lower, upper, owner = _gather(tables[stream], b)
                r = robust_loss(model, lower, upper, np.full(len(lower), MALICIOUS), owner,
                                cfg.bound_method)
                model, state = adam_step(model, r.params(), state, cfg)
                loss = r.loss
            sums[stream + 1] += loss
            counts[stream + 1] += 1
        if history is not None:
            means = sums / np.maximum(counts, 1)
            history.append({"epoch": epoch, "regular": float(means[0]),
                            **{f"robust_{s.label}": float(m) for s, m in zip(specs, means[1:])}})
        log.debug("epoch %d done", epoch)
    return model


def full_subtree_variants(X, vocab: Vocabulary, spec: PropertySpec) -> np.ndarray:
    """Full-subtree deletions or insertions at the property's distance (region corners)."""
    out = []
    for x in np.asarray(X):
        lo, up = region_arrays(x, vocab, spec)
        corners = lo if spec.kind == "SubtreeDeletion" else up
        keep = ~(corners == x).all(axis=1)
        out.append(corners[keep])
    return np.concatenate(out) if out else np.zeros((0, vocab.dim), np.uint8)


def adv_retrain(dataset: Dataset, specs: Sequence[PropertySpec], cfg: TrainConfig, vocab: Vocabulary,
                attack_fraction: float = 0.25, history: list | None = None) -> MlpModel:
    """Regular training on the training set augmented with full-subtree variants of the
    malicious samples plus, each epoch, bounded-gradient evasions of the current model."""
    from .attacks.gradient import bounded_attack_batch

    mal = dataset.X_train[dataset.y_train == MALICIOUS]
    variants = [full_subtree_variants(mal, vocab, s) for s in specs]
    base_X = np.concatenate([dataset.X_train, *variants])
    base_y = np.concatenate([dataset.y_train, np.ones(sum(len(v) for v in variants), np.int64)])
    rng = np.random.default_rng(cfg.rng_seed)
    model = init_model(base_X.shape[1], cfg.hidden, cfg.rng_seed)
    state = AdamState.zeros_like(model)
    for epoch in range(cfg.epochs):
        found = []
        if epoch > 0 and attack_fraction > 0 and len(mal):
            pick = rng.permutation(len(mal))[:max(1, int(round(attack_fraction * len(mal))))]
            for spec in specs:
                res = bounded_attack_batch(model, mal[np.sort(pick)], vocab, spec)
                found += [r.vector for r in res if r.success]
        X = np.concatenate([base_X, np.array(found, np.uint8).reshape(-1, base_X.shape[1])])
        y = np.concatenate([base_y, np.ones(len(found), np.int64)])
        losses = []
        for b in _batches(rng, len(X), cfg.batch_size):
            g = backward(model, X[b].astype(np.float64), y[b])
            model, state = adam_step(model, g, state, cfg)
            losses.append(g.loss)
        if history is not None:
            history.append({"epoch": epoch, "regular": float(np.mean(losses)), "attack_examples": len(found)})
    return model


# -- evaluation ---------------------------------------------------------------


@dataclass
class Metrics:
    accuracy: float
    fpr: float
    precision: float
    recall: float
    vra: dict = field(default_factory=dict)
    era: dict = field(default_factory=dict)
    train_minutes: float | None = None

    def to_json(self) -> dict:
        return {"accuracy": self.accuracy, "fpr": self.fpr, "precision": self.precision,
                "recall": self.recall, "vra": dict(self.vra), "era": dict(self.era),
                "train_minutes": self.train_minutes}


def predict_any(model, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X))
    if isinstance(model, MlpModel):
        return mlp_predict(model, X)
    return np.asarray(model.predict(X), dtype=np.int64)


def confusion(y_true, y_pred) -> dict:
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    return {
        "tp": int(((y_true == 1) & (y_pred == 1)).sum()),
        "fp": int(((y_true == 0) & (y_pred == 1)).sum()),
        "tn": int(((y_true == 0) & (y_pred == 0)).sum()),
        "fn": int(((y_true == 1) & (y_pred == 0)).sum()),
    }


def classification_metrics(y_true, y_pred) -> Metrics:
    c = confusion(y_true, y_pred)
    n = sum(c.values())
    acc = (c["tp"] + c["tn"]) / n if n else 0.0
    fpr = c["fp"] / (c["fp"] + c["tn"]) if c["fp"] + c["tn"] else 0.0
    prec = c["tp"] / (c["tp"] + c["fp"]) if c["tp"] + c["fp"] else 0.0
    rec = c["tp"] / (c["tp"] + c["fn"]) if c["tp"] + c["fn"] else 0.0
    return Metrics(acc, fpr, prec, rec)


def evaluate(model, dataset: Dataset, specs: Sequence[PropertySpec], vocab: Vocabulary,
             vra_fn: Callable | None = None, era: bool = True, method: str = "symbolic") -> Metrics:
    """Test-split metrics plus per-property VRA and bounded-attack ERA.

    ``vra_fn(model, samples, spec)`` overrides the verifier (needed for tree
    ensembles and subtree ensembles); by default MLPs go through
    :func:`verdoc.verify.vra`.
    """
    from .attacks.gradient import bounded_attack_batch
    from .verify import vra as nn_vra

    if len(dataset.X_test) == 0:
        raise ValueError("empty test split")
    m = classification_metrics(dataset.y_test, predict_any(model, dataset.X_test))
    mal = dataset.malicious_test
    for spec in specs:
        if vra_fn is not None:
            m.vra[spec.label] = float(vra_fn(model, mal, spec))
        elif isinstance(model, MlpModel):
            m.vra[spec.label] = nn_vra(model, mal, vocab, spec, method)
        if era and len(mal):
            grad_model = getattr(model, "base", model)
            if isinstance(grad_model, MlpModel):
                res = bounded_attack_batch(grad_model, mal, vocab, spec, predict=lambda X: predict_any(model, X))
                m.era[spec.label] = float(np.mean([not r.success for r in res]))
    return m
