"""Gradient-guided bit-flip attacks on the feature vector."""
from __future__ import annotations

from typing import Callable

import numpy as np

from ..featurespace import Vocabulary
from ..mlp import MALICIOUS, MlpModel, backward_from_logit_grad, ce_from_logits, logits_of
from ..mlp import predict as mlp_predict
from ..properties import DELETION, PropertySpec, region_arrays
from .result import AttackResult


def input_gradient(model: MlpModel, X: np.ndarray, label: int = MALICIOUS) -> np.ndarray:
    """Row-wise gradient of the cross-entropy for ``label`` with respect to the input."""
    X = np.asarray(X, dtype=np.float64)
    z = logits_of(model, X)
    _, dz = ce_from_logits(z, np.full(len(X), label))
    return backward_from_logit_grad(model, X, dz)[2]


def bounded_attack_batch(model: MlpModel, X, vocab: Vocabulary, spec: PropertySpec,
                         predict: Callable | None = None, ids=None) -> list[AttackResult]:
    """Bounded gradient attack on every row of ``X``.

    For each region of the property the attack starts at the seed and keeps
    flipping the still-unflipped free bit whose flip raises the malicious
    loss the most (0 to 1 for insertion, 1 to 0 for deletion) until the
    prediction turns benign or the region is used up.  All regions of all
    seeds advance together, one flip per step.
    """
    predict = predict or (lambda V: mlp_predict(model, V))
    X = np.asarray(X, dtype=np.uint8)
    ids = list(ids) if ids is not None else [str(i) for i in range(len(X))]
    results: list[AttackResult | None] = [None] * len(X)
    starts, ends, owner = [], [], []
    first_pred = predict(X) if len(X) else np.zeros(0, np.int64)
    for i, x in enumerate(X):
        if first_pred[i] != MALICIOUS:
            results[i] = AttackResult(True, x.copy(), l0_distance=0, seed_id=ids[i], attack="bounded_gradient")
            continue
        lo, up = region_arrays(x, vocab, spec)
        starts.append(np.repeat(x[None], len(lo), axis=0))
        ends.append(lo if spec.kind == DELETION else up)
        owner += [i] * len(lo)
    for i in range(len(X)):
        if results[i] is None and i not in owner:
            results[i] = AttackResult(False, X[i].copy(), seed_id=ids[i], attack="bounded_gradient")
    if not owner:
        return results
    cur = np.concatenate(starts)
    avail = cur != np.concatenate(ends)
    owner = np.array(owner)
    sign = -1.0 if spec.kind == DELETION else 1.0
    done = np.zeros(len(cur), bool)
    success = np.zeros(len(cur), bool)
    steps = np.zeros(len(cur), np.int64)
    while True:
        active = np.flatnonzero(~done)
        if not len(active):
            break
        evaded = predict(cur[active]) != MALICIOUS
        success[active[evaded]] = True
        done[active[evaded]] = True
        active = active[~evaded & avail[active].any(axis=1)]
        done[np.setdiff1d(np.flatnonzero(~done), active)] = True
        if not len(active):
            break
        gain = sign * input_gradient(model, cur[active])
        gain = np.where(avail[active], gain, -np.inf)
        pick = gain.argmax(axis=1)
        cur[active, pick] = 1 - cur[active, pick]
        avail[active, pick] = False
        steps[active] += 1
    for i in np.unique(owner):
        rows = np.flatnonzero(owner == i)
        won = rows[success[rows]]
        r = won[np.argmin(steps[won])] if len(won) else rows[0]
        results[i] = AttackResult(bool(len(won)), cur[r].copy(), l0_distance=int((cur[r] != X[i]).sum()),
                                  iterations=int(steps[rows].sum()), seed_id=ids[i], attack="bounded_gradient",
                                  extra={"subtrees": int(len(rows))})
    return results


def bounded_gradient_attack(model: MlpModel, x, vocab: Vocabulary, spec: PropertySpec,
                            predict: Callable | None = None) -> AttackResult:
    return bounded_attack_batch(model, np.asarray(x)[None], vocab, spec, predict)[0]


def unbounded_gradient_attack(model: MlpModel, x, max_iters: int = 200_000,
                              predict: Callable | None = None) -> AttackResult:
    """Flip one bit per step, in either direction, by largest loss increase.

    Each bit may be flipped at most once; the attack stops at the first benign
    prediction, after ``max_iters`` steps or when every bit is locked.
    ``extra["l0_curve"]`` lists the L0 distance after each step.
    """
    predict = predict or (lambda V: mlp_predict(model, V))
    x0 = np.asarray(x, dtype=np.uint8)
    cur = x0.copy()
    locked = np.zeros(len(cur), bool)
    trace = []
    it = 0
    success = predict(cur[None])[0] != MALICIOUS
    while not success and it < max_iters and not locked.all():
        g = input_gradient(model, cur[None])[0]
        gain = np.where(cur == 0, g, -g)
        gain[locked] = -np.inf
        i = int(np.argmax(gain))
        cur[i] = 1 - cur[i]
        locked[i] = True
        trace.append(("insert" if cur[i] else "delete", i))
        it += 1
        success = predict(cur[None])[0] != MALICIOUS
    return AttackResult(bool(success), cur, l0_distance=int((cur != x0).sum()), iterations=it,
                        mutation_trace=trace, attack="unbounded_gradient",
                        extra={"l0_curve": list(range(1, it + 1))})
