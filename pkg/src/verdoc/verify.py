"""Sound output bounds of an :class:`MlpModel` over box regions.

Two analyses are provided.  The naive one is plain interval arithmetic.  The
symbolic one keeps, for every neuron, a lower and an upper linear expression
in the free input bits of the region and relaxes each crossing ReLU
(``l < 0 < u``) with slope ``u / (u - l)``; its concrete bounds are
intersected with the interval ones at every layer, so they are never looser.

Inputs are binary and every region is a box whose free coordinates range over
``[0, 1]``, so expressions are stored only over those free coordinates.  All
routines work on a batch of regions at once: ``lower`` and ``upper`` are
arrays of shape (regions, dim).

The worst-case logits used by robust training are differentiable end to end:
:func:`robust_loss` backpropagates through the relaxation slopes, the
concrete bounds and the interval intersection, so its gradient is the exact
derivative of the robust loss wherever the activation pattern is locally
constant.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import sparse

from .errors import DimensionMismatch
from .featurespace import Vocabulary
from .mlp import MALICIOUS, MlpModel, ce_from_logits, logits_of
from .properties import IntervalRegion, PropertySpec, region_arrays

METHODS = ("naive", "symbolic")
_CHUNK_ELEMS = 6_000_000  # cap on regions * free dims * width held at once


@dataclass(frozen=True)
class OutputBounds:
    lo: np.ndarray
    hi: np.ndarray
    method: str


@dataclass(frozen=True)
class SymbolicState:
    """Per-neuron linear bounds ``coef @ t + const`` over the free inputs ``t``.

    ``free`` lists the input indices the coefficient columns refer to; every
    other input is fixed at the region's lower corner.
    """

    free: np.ndarray
    lower_coef: np.ndarray
    lower_const: np.ndarray
    upper_coef: np.ndarray
    upper_const: np.ndarray
    l: np.ndarray
    u: np.ndarray


@dataclass(frozen=True)
class Verdict:
    verified: bool
    margin: float

    def __bool__(self):
        return self.verified


def _check(model: MlpModel, lower, upper):
    lower = np.atleast_2d(np.asarray(lower, dtype=np.float64))
    upper = np.atleast_2d(np.asarray(upper, dtype=np.float64))
    if lower.shape != upper.shape or lower.shape[1] != model.input_dim:
        raise DimensionMismatch(f"region of shape {lower.shape}/{upper.shape} "
                                f"for a model with {model.input_dim} inputs")
    if np.any(lower > upper):
        raise ValueError("region has lower > upper")
    return lower, upper


def _free_index(lower: np.ndarray, upper: np.ndarray):
    free = upper > lower
    width = int(free.sum(axis=1).max()) if len(free) else 0
    order = np.argsort(~free, axis=1, kind="stable")[:, :width]
    # input i = lower_i + t * width_i with t in [0, 1]; padding columns get width 0
    mask = np.take_along_axis(upper - lower, order, axis=1)
    return order, mask


def _flat(a: np.ndarray) -> np.ndarray:
    return a.reshape(-1, a.shape[-1])


# -- naive intervals -----------------------------------------------------------


def naive_bounds(model: MlpModel, lower, upper) -> tuple[np.ndarray, np.ndarray]:
    """Interval bounds on the logits for each row-pair of ``lower``/``upper``."""
    lo, hi = _check(model, lower, upper)
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        wp, wn = np.maximum(w, 0), np.minimum(w, 0)
        lo, hi = lo @ wp.T + hi @ wn.T + b, hi @ wp.T + lo @ wn.T + b
        if i < last:
            lo, hi = np.maximum(lo, 0), np.maximum(hi, 0)
    return lo, hi


def propagate_naive(model: MlpModel, region: IntervalRegion) -> OutputBounds:
    lo, hi = naive_bounds(model, region.lower, region.upper)
    return OutputBounds(lo[0], hi[0], "naive")


# -- symbolic relaxation -----------------------------------------------------


class _Tape:
    """Forward quantities kept for the reverse pass."""

    def __init__(self):
        self.layers = []


def _symbolic(model: MlpModel, lower: np.ndarray, upper: np.ndarray, method: str,
              keep: bool = False, states: list | None = None):
    """Bounds for a batch of regions; optionally records a tape for gradients."""
    idx, m = _free_index(lower, upper)
    R, F = idx.shape
    x0 = lower
    w0, b0 = model.weights[0], model.biases[0]
    A = w0.T[idx] * m[..., None]  # (R, F, n)
    c = x0 @ w0.T + b0
    AL, AU, cL, cU = A, A, c, c
    tape = _Tape() if keep else None
    if keep:
        tape.idx, tape.m, tape.x0 = idx, m, x0
    pl = pu = None
    last = len(model.weights) - 1
    for k in range(last + 1):
        rec = {}
        symbolic = method == "symbolic" or k == 0
        if symbolic:
            lsym = cL + np.minimum(AL, 0).sum(axis=1)
            usym = cU + np.maximum(AU, 0).sum(axis=1)
        if k == 0:
            l, u = lsym, usym
        else:
            w, b = model.weights[k], model.biases[k]
            wp, wn = np.maximum(w, 0), np.minimum(w, 0)
            ln = pl @ wp.T + pu @ wn.T + b
            un = pu @ wp.T + pl @ wn.T + b
            if symbolic:
                selL, selU = lsym >= ln, usym <= un
                l, u = np.where(selL, lsym, ln), np.where(selU, usym, un)
                rec.update(selL=selL, selU=selU)
            else:
                l, u = ln, un
            rec.update(pl_prev=pl, pu_prev=pu)
        if keep:
            rec.update(AL=AL, AU=AU, cL=cL, cU=cU, l=l, u=u, symbolic=symbolic)
        if states is not None and symbolic:
            states.append((AL, cL, AU, cU, l, u))
        if k == last:
            if keep:
                tape.layers.append(rec)
            return (l, u, tape) if keep else (l, u)
        act = l >= 0
        dead = (u <= 0) & ~act
        cross = ~act & ~dead
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = np.where(cross, u / (u - l), act.astype(np.float64))
        pl, pu = np.where(act, l, 0.0), np.where(dead, 0.0, u)
        w, b = model.weights[k + 1], model.biases[k + 1]
        wp, wn = np.maximum(w, 0), np.minimum(w, 0)
        if method == "symbolic":
            AL2, AU2 = lam[:, None, :] * AL, lam[:, None, :] * AU
            cL2, cU2 = lam * cL, lam * (cU - np.where(cross, l, 0.0))
            n2 = w.shape[0]
            ALf, AUf = _flat(AL2), _flat(AU2)
            AU_n = (AUf @ wp.T + ALf @ wn.T).reshape(R, F, n2)
            AL_n = (ALf @ wp.T + AUf @ wn.T).reshape(R, F, n2)
            cU_n = cU2 @ wp.T + cL2 @ wn.T + b
            cL_n = cL2 @ wp.T + cU2 @ wn.T + b
            if keep:
                rec.update(lam=lam, act=act, dead=dead, cross=cross, AL2=AL2, AU2=AU2, cL2=cL2, cU2=cU2)
            AL, AU, cL, cU = AL_n, AU_n, cL_n, cU_n
        elif keep:
            rec.update(act=act, dead=dead, cross=cross)
        if keep:
            tape.layers.append(rec)


def symbolic_bounds(model: MlpModel, lower, upper, method: str = "symbolic"):
    """Logit bounds for each region, processed in memory-bounded chunks."""
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    lower, upper = _check(model, lower, upper)
    if method == "naive":
        return naive_bounds(model, lower, upper)
    R = len(lower)
    width = max(w.shape[0] for w in model.weights)
    F = int((upper > lower).sum(axis=1).max()) if R else 0
    step = max(1, _CHUNK_ELEMS // max(1, F * width))
    lo = np.empty((R, 2))
    hi = np.empty((R, 2))
    for s in range(0, R, step):
        lo[s:s + step], hi[s:s + step] = _symbolic(model, lower[s:s + step], upper[s:s + step], method)
    return lo, hi


def output_bounds(model: MlpModel, lower, upper, method: str = "symbolic"):
    return symbolic_bounds(model, lower, upper, method)


def propagate_symbolic(model: MlpModel, region: IntervalRegion, return_states: bool = False):
    """Symbolic output bounds of one region (and optionally the per-layer states)."""
    lower, upper = _check(model, region.lower, region.upper)
    states: list = []
    lo, hi = _symbolic(model, lower, upper, "symbolic", states=states)
    bounds = OutputBounds(lo[0], hi[0], "symbolic")
    if not return_states:
        return bounds
    free = np.flatnonzero(upper[0] > lower[0])
    out = [SymbolicState(free, AL[0], cL[0], AU[0], cU[0], l[0], u[0]) for AL, cL, AU, cU, l, u in states]
    return bounds, out


# -- verification ------------------------------------------------------------


def margins(lo: np.ndarray, hi: np.ndarray, true_class) -> np.ndarray:
    """Worst-case margin: true-class lower bound minus other-class upper bound."""
    y = np.broadcast_to(np.asarray(true_class, dtype=np.int64), (len(lo),))
    rows = np.arange(len(lo))
    return lo[rows, y] - hi[rows, 1 - y]


def verify_region(model: MlpModel, region: IntervalRegion, true_class: int = MALICIOUS,
                  method: str = "symbolic") -> Verdict:
    """Verified iff the true class's lower bound strictly beats the other's upper bound."""
    if true_class not in (0, 1):
        raise ValueError("true_class must be 0 or 1")
    lo, hi = symbolic_bounds(model, region.lower[None], region.upper[None], method)
    margin = float(margins(lo, hi, true_class)[0])
    return Verdict(margin > 0, margin)


@dataclass(frozen=True)
class SampleVerdict:
    sample_id: str
    property: str
    regions_total: int
    regions_verified: int
    verified: bool
    worst_margin: float


def verify_samples(model: MlpModel, X, vocab: Vocabulary, spec: PropertySpec,
                   method: str = "symbolic", ids: Sequence[str] | None = None,
                   true_class: int = MALICIOUS) -> list[SampleVerdict]:
    """Per-sample verdicts: a sample is verified iff it is correctly classified
    and every one of its regions verifies."""
    X = np.asarray(X)
    ids = list(ids) if ids is not None else [str(i) for i in range(len(X))]
    lowers, uppers, owner = [], [], []
    for i, x in enumerate(X):
        lo_i, up_i = region_arrays(x, vocab, spec)
        lowers += [x[None].astype(np.uint8), lo_i]
        uppers += [x[None].astype(np.uint8), up_i]
        owner += [i] * (1 + len(lo_i))
    owner = np.array(owner, dtype=np.int64)
    is_point = np.zeros(len(owner), bool)
    is_point[np.r_[0, np.flatnonzero(np.diff(owner)) + 1]] = True
    lower, upper = np.concatenate(lowers), np.concatenate(uppers)
    lo, hi = symbolic_bounds(model, lower, upper, method)
    marg = margins(lo, hi, true_class)
    out = []
    for i in range(len(X)):
        sel = owner == i
        reg = sel & ~is_point
        worst = float(marg[sel].min())
        n_ok = int((marg[reg] > 0).sum())
        out.append(SampleVerdict(ids[i], spec.label, int(reg.sum()), n_ok, bool(worst > 0), worst))
    return out


def vra(model: MlpModel, samples, vocab: Vocabulary, spec: PropertySpec, method: str = "symbolic") -> float:
    """Fraction of malicious samples verified for every region of ``spec``."""
    samples = np.asarray(samples)
    if len(samples) == 0:
        return 0.0
    res = verify_samples(model, samples, vocab, spec, method)
    return sum(r.verified for r in res) / len(res)


def report_csv(verdicts: Sequence[SampleVerdict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample_id", "property", "regions_total", "regions_verified", "verdict", "worst_margin"])
    for v in verdicts:
        w.writerow([v.sample_id, v.property, v.regions_total, v.regions_verified,
                    "Verified" if v.verified else "Unknown", repr(v.worst_margin)])
    return buf.getvalue()


# -- worst-case logits and robust loss -------------------------------------------


def _pick_worst(lo, hi, y):
    rows = np.arange(len(lo))
    z = hi.copy()
    z[rows, y] = lo[rows, y]
    return z


def worst_case_logits(model: MlpModel, region: IntervalRegion, true_class: int = MALICIOUS,
                      method: str = "symbolic") -> np.ndarray:
    """Pseudo-logits with the true class at its lower and the other class at its upper bound."""
    lo, hi = symbolic_bounds(model, region.lower[None], region.upper[None], method)
    return _pick_worst(lo, hi, np.array([true_class]))[0]


@dataclass
class RobustLoss:
    loss: float
    weights: list
    biases: list
    chosen: np.ndarray  # index of the worst region of each sample
    signature: bytes

    def params(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


def robust_loss(model: MlpModel, lower, upper, y, owner=None, method: str = "symbolic",
                grad: bool = True) -> RobustLoss:
    """Mean over samples of the worst region's cross-entropy on worst-case logits.

    ``owner[r]`` names the sample region ``r`` belongs to (default: each region
    is its own sample); ``y`` holds one label per region.
    """
    lower, upper = _check(model, lower, upper)
    y = np.asarray(y, dtype=np.int64)
    owner = np.arange(len(lower)) if owner is None else np.asarray(owner)
    lo, hi = symbolic_bounds(model, lower, upper, method)
    losses, _ = ce_from_logits(_pick_worst(lo, hi, y), y)
    groups = np.unique(owner)
    chosen = np.array([np.flatnonzero(owner == g)[np.argmax(losses[owner == g])] for g in groups])
    value = float(losses[chosen].mean())
    if not grad:
        return RobustLoss(value, [], [], chosen, b"")
    l, u, tape = _symbolic(model, lower[chosen], upper[chosen], method, keep=True)
    yc = y[chosen]
    _, dz = ce_from_logits(_pick_worst(l, u, yc), yc)
    dz /= len(chosen)
    rows = np.arange(len(chosen))
    dlo = np.zeros_like(l)
    dhi = dz.copy()
    dlo[rows, yc] = dz[rows, yc]
    dhi[rows, yc] = 0.0
    gw, gb = _reverse(model, tape, dlo, dhi)
    return RobustLoss(value, gw, gb, chosen, _signature(model, tape, chosen, losses, owner))


def _reverse(model: MlpModel, tape: _Tape, dl: np.ndarray, du: np.ndarray):
    """Reverse pass through :func:`_symbolic`; returns weight and bias gradients."""
    K = len(model.weights)
    gw = [np.zeros_like(w) for w in model.weights]
    gb = [np.zeros_like(b) for b in model.biases]
    R, F = tape.idx.shape
    # incoming gradients for the pre-activation expressions of the current layer
    dAL = dAU = dcL = dcU = None
    for k in range(K - 1, -1, -1):
        rec = tape.layers[k]
        n = rec["l"].shape[1]
        if dAL is None:
            dAL = np.zeros((R, F, n)) if rec["symbolic"] else None
            dAU = np.zeros((R, F, n)) if rec["symbolic"] else None
            dcL = np.zeros((R, n))
            dcU = np.zeros((R, n))
        if k > 0:
            if rec["symbolic"]:
                selL, selU = rec["selL"], rec["selU"]
                dlsym, dln = dl * selL, dl * ~selL
                dusym, dun = du * selU, du * ~selU
            else:
                dlsym = dusym = None
                dln, dun = dl, du
        else:
            dlsym, dusym = dl, du
        if dlsym is not None:
            dcL = dcL + dlsym
            dcU = dcU + dusym
            dAL = dAL + dlsym[:, None, :] * (rec["AL"] < 0)
            dAU = dAU + dusym[:, None, :] * (rec["AU"] > 0)
        if k == 0:
            break
        w = model.weights[k]
        wp, wn = np.maximum(w, 0), np.minimum(w, 0)
        pl_prev, pu_prev = rec["pl_prev"], rec["pu_prev"]
        # interval part: ln = pl wp + pu wn + b, un = pu wp + pl wn + b
        dWp = dln.T @ pl_prev + dun.T @ pu_prev
        dWn = dln.T @ pu_prev + dun.T @ pl_prev
        gb[k] += dln.sum(0) + dun.sum(0)
        dpl = dln @ wp + dun @ wn
        dpu = dln @ wn + dun @ wp
        prev = tape.layers[k - 1]
        lam, cross, act, dead = prev.get("lam"), prev["cross"], prev["act"], prev["dead"]
        l, u = prev["l"], prev["u"]
        dl_prev = dpl * act
        du_prev = dpu * ~dead
        n_prev = l.shape[1]
        if prev["symbolic"] and lam is not None:
            # expression part: AU = AU2 wp + AL2 wn, AL = AL2 wp + AU2 wn (same for constants)
            AL2, AU2, cL2, cU2 = prev["AL2"], prev["AU2"], prev["cL2"], prev["cU2"]
            dALf, dAUf = _flat(dAL), _flat(dAU)
            AL2f, AU2f = _flat(AL2), _flat(AU2)
            dWp += dAUf.T @ AU2f + dALf.T @ AL2f + dcU.T @ cU2 + dcL.T @ cL2
            dWn += dAUf.T @ AL2f + dALf.T @ AU2f + dcU.T @ cL2 + dcL.T @ cU2
            gb[k] += dcU.sum(0) + dcL.sum(0)
            dAU2 = (dAUf @ wp + dALf @ wn).reshape(R, F, n_prev)
            dAL2 = (dALf @ wp + dAUf @ wn).reshape(R, F, n_prev)
            dcU2 = dcU @ wp + dcL @ wn
            dcL2 = dcL @ wp + dcU @ wn
            # relaxed ReLU: AU2 = lam AU, AL2 = lam AL, cU2 = lam (cU - l*cross), cL2 = lam cL
            AL, AU, cL, cU = prev["AL"], prev["AU"], prev["cL"], prev["cU"]
            shift = np.where(cross, l, 0.0)
            dlam = (np.einsum("rfn,rfn->rn", dAU2, AU) + np.einsum("rfn,rfn->rn", dAL2, AL)
                    + dcU2 * (cU - shift) + dcL2 * cL)
            dl_prev = dl_prev - lam * cross * dcU2
            with np.errstate(divide="ignore", invalid="ignore"):
                inv = np.where(cross, 1.0 / (u - l) ** 2, 0.0)
            dl_prev = dl_prev + cross * dlam * u * inv
            du_prev = du_prev - cross * dlam * l * inv
            dAL = lam[:, None, :] * dAL2
            dAU = lam[:, None, :] * dAU2
            dcL = lam * dcL2
            dcU = lam * dcU2
        else:
            dAL = dAU = None
            dcL = np.zeros((R, n_prev))
            dcU = np.zeros((R, n_prev))
        gw[k] += dWp * (w > 0) + dWn * (w < 0)
        dl, du = dl_prev, du_prev
    # first layer: A = W0^T[idx] * m, c = x0 W0^T + b0, shared by both sides
    dA = dAL + dAU
    dc = dcL + dcU
    d = model.input_dim
    scatter = sparse.csr_matrix((tape.m.ravel(), (tape.idx.ravel(), np.arange(R * F))), shape=(d, R * F))
    gw[0] += np.asarray(scatter @ _flat(dA)).T + dc.T @ tape.x0
    gb[0] += dc.sum(0)
    return gw, gb


def _signature(model: MlpModel, tape: _Tape, chosen, losses, owner) -> bytes:
    """Fingerprint of every discrete choice the robust loss depends on."""
    parts = [chosen.tobytes()]
    for w in model.weights:
        parts.append(np.packbits(w > 0).tobytes() + np.packbits(w < 0).tobytes())
    for rec in tape.layers:
        for key in ("act", "dead", "cross", "selL", "selU"):
            if key in rec:
                parts.append(np.packbits(rec[key]).tobytes())
        if rec["symbolic"]:
            parts.append(np.packbits(rec["AL"] < 0).tobytes() + np.packbits(rec["AU"] > 0).tobytes())
    return b"|".join(parts)


def plain_logits(model: MlpModel, X) -> np.ndarray:
    return logits_of(model, np.asarray(X, dtype=np.float64))
