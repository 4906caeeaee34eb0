"""Baseline classifiers: monotone boosted trees and subtree ensembles.

The boosted model is a sum of depth-2 trees over binary features.  Each split
sends ``x[f] == 0`` left and ``x[f] == 1`` right, and monotonicity is enforced
while fitting: a split whose optimal left weight exceeds its right weight is
rejected, and the midpoint of the pair caps every leaf below the left child and
floors every leaf below the right child.  Setting a bit can therefore never
lower the score.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .errors import Infeasible, ModeMismatch, SchemaViolation
from .featurespace import Vocabulary
from .mlp import MALICIOUS, MlpModel, TrainConfig
from .mlp import predict as mlp_predict
from .properties import DELETION, PropertySpec, regions_for
from .verify import margins, symbolic_bounds

N_LEARNER_PRESETS = (10, 100, 1000, 2000)


# -- boosted trees -------------------------------------------------------------


@dataclass
class BoostedTree:
    """Depth-2 trees as nested dicts: ``{"feature", "left", "right"}`` or ``{"leaf"}``."""

    trees: list
    base_score: float = 0.0
    n_features: int = 0

    def score(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X))
        out = np.full(len(X), self.base_score, dtype=np.float64)
        for t in self.trees:
            out += _tree_eval(t, X)
        return out

    def predict(self, X) -> np.ndarray:
        return (self.score(X) > 0).astype(np.int64)

    def features(self) -> list[int]:
        found = set()
        for t in self.trees:
            stack = [t]
            while stack:
                node = stack.pop()
                if "feature" in node:
                    found.add(node["feature"])
                    stack += [node["left"], node["right"]]
        return sorted(found)

    def to_json(self) -> str:
        return json.dumps({"base_score": self.base_score, "n_features": self.n_features,
                           "trees": self.trees}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "BoostedTree":
        try:
            obj = json.loads(text)
            return cls(obj["trees"], float(obj["base_score"]), int(obj["n_features"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaViolation(f"not a boosted-tree file: {exc}") from exc


def _tree_eval(node, X) -> np.ndarray:
    if "leaf" in node:
        return np.full(len(X), node["leaf"], dtype=np.float64)
    right = X[:, node["feature"]] > 0
    return np.where(right, _tree_eval(node["right"], X), _tree_eval(node["left"], X))


def _leaf_weight(G, H, lam, lo, hi):
    return np.clip(-G / (H + lam), lo, hi)


def _objective(G, H, lam, w):
    return G * w + 0.5 * (H + lam) * w * w


def _best_split(X, g, h, lam, lo, hi, min_child_weight):
    """Best monotone split of the rows given, or None."""
    G, H = g.sum(), h.sum()
    G1, H1 = g @ X, h @ X
    G0, H0 = G - G1, H - H1
    w0 = _leaf_weight(G0, H0, lam, lo, hi)
    w1 = _leaf_weight(G1, H1, lam, lo, hi)
    parent = _objective(G, H, lam, _leaf_weight(G, H, lam, lo, hi))
    gain = parent - _objective(G0, H0, lam, w0) - _objective(G1, H1, lam, w1)
    ok = (w0 <= w1) & (H0 >= min_child_weight) & (H1 >= min_child_weight) & (gain > 1e-12)
    if not ok.any():
        return None
    gain = np.where(ok, gain, -np.inf)
    f = int(np.argmax(gain))
    return f, float(w0[f]), float(w1[f])


def _grow(X, g, h, depth, lam, lo, hi, eta, min_child_weight):
    split = _best_split(X, g, h, lam, lo, hi, min_child_weight) if depth > 0 else None
    if split is None:
        return {"leaf": float(eta * _leaf_weight(g.sum(), h.sum(), lam, lo, hi))}
    f, w0, w1 = split
    mid = 0.5 * (w0 + w1)
    right = X[:, f] > 0
    return {
        "feature": f,
        "left": _grow(X[~right], g[~right], h[~right], depth - 1, lam, lo, mid, eta, min_child_weight),
        "right": _grow(X[right], g[right], h[right], depth - 1, lam, mid, hi, eta, min_child_weight),
    }


def train_monotonic(X, y, n_learners: int = 100, learning_rate: float = 0.3, depth: int = 2,
                    reg_lambda: float = 1.0, min_child_weight: float = 1e-3) -> BoostedTree:
    """Gradient boosting on the logistic loss with monotone increasing constraints."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    pos = np.clip(y.mean(), 1e-6, 1 - 1e-6)
    base = float(np.log(pos / (1 - pos)))
    margin = np.full(len(y), base)
    trees = []
    for _ in range(n_learners):
        p = 1.0 / (1.0 + np.exp(-margin))
        g, h = p - y, p * (1 - p)
        tree = _grow(X, g, h, depth, reg_lambda, -np.inf, np.inf, learning_rate, min_child_weight)
        trees.append(tree)
        margin += _tree_eval(tree, X)
    return BoostedTree(trees, base, X.shape[1])


def _tree_min(node, status) -> float:
    """Smallest leaf reachable when ``status[f]`` is 0, 1 or None (free)."""
    if "leaf" in node:
        return node["leaf"]
    s = status.get(node["feature"], 1)
    if s is None:
        return min(_tree_min(node["left"], status), _tree_min(node["right"], status))
    return _tree_min(node["right"] if s else node["left"], status)


def vra_monotonic(model: BoostedTree, samples, vocab: Vocabulary, spec: PropertySpec) -> float:
    """Insertion properties: malicious accuracy.  Deletion properties: every full
    deletion of ``spec.distance`` subtrees still scores malicious (which covers
    all partial deletions by monotonicity)."""
    samples = np.asarray(samples)
    if len(samples) == 0:
        return 0.0
    ok = model.predict(samples) == MALICIOUS
    if spec.kind != DELETION:
        return float(ok.mean())
    for i, x in enumerate(samples):
        if not ok[i]:
            continue
        regs = regions_for(x, vocab, spec)
        if regs:
            ok[i] = bool((model.predict(np.stack([r.lower for r in regs])) == MALICIOUS).all())
    return float(ok.mean())


# -- exact minimal deletion --------------------------------------------------


def minimal_deletion_evasion(model: BoostedTree, x) -> tuple[list[int], int]:
    """Smallest set of set bits of ``x`` whose clearing makes ``model`` predict benign.

    Iterative deepening on the set size; each branch is pruned when even
    clearing every still-undecided bit cannot bring the score to zero or below.
    """
    x = np.asarray(x)
    if model.score(x[None])[0] <= 0:
        return [], 0
    used = set(model.features())
    cand = [int(i) for i in np.flatnonzero(x) if int(i) in used]
    status_all = {f: int(x[f]) for f in used}

    def score_with(cleared, free=()):
        status = dict(status_all)
        status.update({f: 0 for f in cleared})
        status.update({f: None for f in free})
        return model.base_score + sum(_tree_min(t, status) for t in model.trees)

    if model.score(np.zeros_like(x)[None])[0] > 0:
        raise Infeasible("clearing every set bit still scores malicious")

    def search(pos, chosen, budget):
        if budget == 0:
            z = x.copy()
            z[chosen] = 0
            return list(chosen) if model.score(z[None])[0] <= 0 else None
        if score_with(chosen, cand[pos:]) > 1e-9:
            return None  # even clearing everything undecided is not enough
        for i in range(pos, len(cand) - budget + 1):
            found = search(i + 1, chosen + [cand[i]], budget - 1)
            if found is not None:
                return found
        return None

    for k in range(1, len(cand) + 1):
        found = search(0, [], k)
        if found is not None:
            return sorted(found), k
    raise Infeasible("no deletion set evades")  # unreachable given the check above


def _walk_leaves(node, path=()):
    """Yield (leaf value, ((feature, side), ...)) for every leaf."""
    if "leaf" in node:
        yield node["leaf"], path
        return
    yield from _walk_leaves(node["left"], path + ((node["feature"], 0),))
    yield from _walk_leaves(node["right"], path + ((node["feature"], 1),))


def _fmt(v: float) -> str:
    return repr(float(v))


def _linear(terms) -> str:
    out = []
    for coef, name in terms:
        sign = "-" if coef < 0 else "+"
        mag = abs(coef)
        body = name if mag == 1 else f"{_fmt(mag)} {name}"
        out.append(f"{sign} {body}")
    text = " ".join(out)
    return text[2:] if text.startswith("+ ") else text


def export_milp(model: BoostedTree, x) -> str:
    """LP-format program for the minimum-L0 evasion of ``model`` from ``x``.

    ``p_f`` is the value of binary feature f, ``l_t_j`` selects leaf j of tree t
    and ``d_f = 1 - p_f`` marks a deleted bit of the seed.  Leaves must agree
    with the predicates, the total score must be at most zero (benign), and the
    objective counts changed features.
    """
    x = np.asarray(x)
    feats = model.features()
    lines = ["\\ minimum-L0 evasion of a tree ensemble", "Minimize"]
    obj = [(1.0, f"d_{f}") for f in feats if x[f]] + [(1.0, f"p_{f}") for f in feats if not x[f]]
    lines.append(" obj: " + (_linear(obj) if obj else "0 p_none"))
    lines.append("Subject To")
    score_terms = []
    binaries = [f"p_{f}" for f in feats] + [f"d_{f}" for f in feats if x[f]]
    for t, tree in enumerate(model.trees):
        leaves = list(_walk_leaves(tree))
        names = [f"l_{t}_{j}" for j in range(len(leaves))]
        binaries += names
        lines.append(f" one_{t}: {_linear([(1.0, n) for n in names])} = 1")
        constraints: dict[tuple, list[str]] = {}
        for name, (_, path) in zip(names, leaves):
            for depth, (f, side) in enumerate(path):
                constraints.setdefault((path[:depth], f, side), []).append(name)
        for c, ((prefix, f, side), members) in enumerate(sorted(constraints.items())):
            terms = [(1.0, n) for n in members]
            if side == 0:
                lines.append(f" left_{t}_{c}: {_linear(terms + [(1.0, f'p_{f}')])} <= 1")
            else:
                lines.append(f" right_{t}_{c}: {_linear(terms + [(-1.0, f'p_{f}')])} <= 0")
        score_terms += [(v, n) for n, (v, _) in zip(names, leaves) if v != 0]
    for f in feats:
        if x[f]:
            lines.append(f" del_{f}: d_{f} + p_{f} = 1")
    evade = _linear(score_terms) if score_terms else "0 p_none"
    lines.append(f" evade: {evade} <= {_fmt(-model.base_score)}")
    lines.append("Binary")
    lines += [f" {b}" for b in binaries]
    if not obj or not score_terms:
        lines.append(" p_none")
    lines.append("End")
    return "\n".join(lines) + "\n"


_TERM = re.compile(r"([+-]?)\s*((?:\d+\.?\d*(?:[eE][+-]?\d+)?|\.\d+)?)\s*([A-Za-z_][\w.]*)")


@dataclass
class LinearProgram:
    sense: str
    objective: dict
    rows: list  # (name, {var: coef}, op, rhs)
    binaries: list
    variables: list = field(default_factory=list)


def parse_lp(text: str) -> LinearProgram:
    """Parse the LP subset written by :func:`export_milp` (raises SchemaViolation)."""
    section, sense = None, None
    objective: dict = {}
    rows, binaries = [], []
    for raw in text.splitlines():
        line = raw.split("\\", 1)[0].strip()
        if not line:
            continue
        low = line.lower()
        if low in ("minimize", "maximize"):
            section, sense = "obj", low
            continue
        if low in ("subject to", "st", "s.t."):
            section = "st"
            continue
        if low in ("binary", "binaries", "bounds", "general"):
            section = low
            continue
        if low == "end":
            section = "end"
            continue
        if section == "obj":
            _, _, expr = line.partition(":")
            objective = _parse_expr(expr)
        elif section == "st":
            name, _, body = line.partition(":")
            m = re.match(r"(.*?)(<=|>=|=)\s*([-+]?[\d.eE+-]+)$", body.strip())
            if not m:
                raise SchemaViolation(f"bad constraint line: {raw!r}")
            rows.append((name.strip(), _parse_expr(m.group(1)), m.group(2), float(m.group(3))))
        elif section in ("binary", "binaries"):
            binaries += line.split()
        elif section in (None, "end"):
            raise SchemaViolation(f"text outside any section: {raw!r}")
    if sense is None or section != "end":
        raise SchemaViolation("missing objective sense or End")
    names = sorted(set(objective) | {v for _, e, _, _ in rows for v in e} | set(binaries))
    return LinearProgram(sense, objective, rows, binaries, names)


def _parse_expr(expr: str) -> dict:
    out: dict = {}
    expr = expr.strip()
    pos = 0
    while pos < len(expr):
        m = _TERM.match(expr, pos)
        if not m or m.end() == pos:
            raise SchemaViolation(f"cannot parse linear expression near {expr[pos:pos + 20]!r}")
        coef = float(m.group(2)) if m.group(2) else 1.0
        if m.group(1) == "-":
            coef = -coef
        out[m.group(3)] = out.get(m.group(3), 0.0) + coef
        pos = m.end()
        while pos < len(expr) and expr[pos] == " ":
            pos += 1
    return out


def solve_lp(lp: LinearProgram):
    """Solve a parsed program with scipy's MILP solver; returns (status, objective, values)."""
    from scipy.optimize import Bounds, LinearConstraint, milp

    names = lp.variables
    col = {n: i for i, n in enumerate(names)}
    c = np.zeros(len(names))
    for n, v in lp.objective.items():
        c[col[n]] = v
    if lp.sense == "maximize":
        c = -c
    A = np.zeros((len(lp.rows), len(names)))
    lo = np.full(len(lp.rows), -np.inf)
    hi = np.full(len(lp.rows), np.inf)
    for r, (_, expr, op, rhs) in enumerate(lp.rows):
        for n, v in expr.items():
            A[r, col[n]] = v
        if op in ("<=", "="):
            hi[r] = rhs
        if op in (">=", "="):
            lo[r] = rhs
    integrality = np.array([1 if n in set(lp.binaries) else 0 for n in names])
    bounds = Bounds(np.zeros(len(names)), np.where(integrality == 1, 1.0, np.inf))
    cons = [LinearConstraint(A, lo, hi)] if len(lp.rows) else []
    res = milp(c, constraints=cons, integrality=integrality, bounds=bounds)
    if res.status != 0 or res.x is None:
        return "infeasible" if res.status == 2 else f"status {res.status}", None, None
    obj = float(res.fun) if lp.sense == "minimize" else -float(res.fun)
    return "optimal", obj, dict(zip(names, res.x))


# -- subtree ensembles --------------------------------------------------------


@dataclass
class EnsembleWrapper:
    base: MlpModel
    mode: str
    vocab: Vocabulary

    def __post_init__(self):
        if self.mode not in ("AB", "D"):
            raise ValueError("mode must be 'AB' or 'D'")

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X))
        return (ensemble_ab_predict(self, X) if self.mode == "AB" else ensemble_d_predict(self, X))


def _range_masks(vocab: Vocabulary) -> list[np.ndarray]:
    return [vocab.range_mask([s]) for s in vocab.subtree_names]


def _variants(X, masks, keep: bool) -> np.ndarray:
    """All per-subtree variants of each row: zeroed range, or range kept alone."""
    out = []
    for m in masks:
        V = X.copy()
        if keep:
            V[:, ~m] = 0
        else:
            V[:, m] = 0
        out.append(V)
    return np.stack(out, axis=1)  # (rows, N, dim)


def ensemble_ab_predict(wrapper: EnsembleWrapper, X) -> np.ndarray | int:
    """Malicious iff some single full-subtree deletion leaves the base voting malicious."""
    if wrapper.mode != "AB":
        raise ModeMismatch("wrapper is not in AB mode")
    X = np.asarray(X)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    V = _variants(X, _range_masks(wrapper.vocab), keep=False)
    votes = mlp_predict(wrapper.base, V.reshape(-1, X.shape[1])).reshape(len(X), -1)
    out = votes.max(axis=1)
    return int(out[0]) if single else out


def ensemble_d_predict(wrapper: EnsembleWrapper, X) -> np.ndarray | int:
    """Malicious iff some subtree, kept alone, makes the base vote malicious."""
    if wrapper.mode != "D":
        raise ModeMismatch("wrapper is not in D mode")
    X = np.asarray(X)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    V = _variants(X, _range_masks(wrapper.vocab), keep=True)
    votes = mlp_predict(wrapper.base, V.reshape(-1, X.shape[1])).reshape(len(X), -1)
    out = votes.max(axis=1)
    return int(out[0]) if single else out


def _base_verified(base: MlpModel, lower, upper, method) -> np.ndarray:
    lower, upper = np.asarray(lower), np.asarray(upper)
    if len(lower) == 0:
        return np.zeros(0, bool)
    lo, hi = symbolic_bounds(base, lower, upper, method)
    return margins(lo, hi, MALICIOUS) > 0


def vra_ensemble_ab(wrapper: EnsembleWrapper, samples, spec: PropertySpec,
                    method: str = "symbolic") -> float:
    """Ensemble A+B verification by composing each region with one more full deletion.

    For a region R and a subtree t, every member x' of R has x' minus t inside
    R minus t, so if the base is verified on R minus t the ensemble keeps
    the malicious verdict on all of R.  Deletion regions try every t outside
    the deleted set; insertion regions try every t among the inserted
    subtrees.  Property B is scored as malicious accuracy.
    """
    if wrapper.mode != "AB":
        raise ModeMismatch("wrapper is not in AB mode")
    samples = np.asarray(samples)
    if len(samples) == 0:
        return 0.0
    ok = ensemble_ab_predict(wrapper, samples) == MALICIOUS
    if spec.kind != DELETION and spec.distance == 1:
        return float(ok.mean())
    vocab = wrapper.vocab
    names = vocab.subtree_names
    for i, x in enumerate(samples):
        if not ok[i]:
            continue
        for region in regions_for(x, vocab, spec):
            choice = set(region.subtree_choice)
            ts = [t for t in names if (t in choice) != (spec.kind == DELETION)]
            lowers, uppers = [], []
            for t in ts:
                m = vocab.range_mask([t])
                lo, up = region.lower.copy(), region.upper.copy()
                lo[m] = 0
                up[m] = 0
                lowers.append(lo)
                uppers.append(up)
            if not _base_verified(wrapper.base, lowers, uppers, method).any():
                ok[i] = False
                break
    return float(ok.mean())


def vra_ensemble_d(wrapper: EnsembleWrapper, samples, spec: PropertySpec,
                   method: str = "symbolic") -> float:
    """Ensemble D verification: some single-subtree projection interval verifies.

    Deletion properties use ``[0, x restricted to s]``; insertion properties
    use ``[x restricted to s, all ones on s]`` (which is ``[0, 1]`` on s when s
    is absent).  Either way the projection of every reachable variant lies in
    the interval, so one verified subtree suffices.
    """
    if wrapper.mode != "D":
        raise ModeMismatch("wrapper is not in D mode")
    samples = np.asarray(samples)
    if len(samples) == 0:
        return 0.0
    ok = ensemble_d_predict(wrapper, samples) == MALICIOUS
    masks = _range_masks(wrapper.vocab)
    for i, x in enumerate(samples):
        if not ok[i]:
            continue
        lowers, uppers = [], []
        for m in masks:
            proj = np.where(m, x, 0).astype(np.uint8)
            if spec.kind == DELETION:
                lowers.append(np.zeros_like(proj))
                uppers.append(proj)
            else:
                lowers.append(proj)
                uppers.append(m.astype(np.uint8))
        ok[i] = bool(_base_verified(wrapper.base, lowers, uppers, method).any())
    return float(ok.mean())


def augment_ab(X, y, vocab: Vocabulary) -> tuple[np.ndarray, np.ndarray]:
    """Training set for the A+B base: originals plus every single full-subtree deletion."""
    X = np.asarray(X)
    extra, labels = [X], [np.asarray(y)]
    for m in _range_masks(vocab):
        present = X[:, m].any(axis=1)
        V = X[present].copy()
        V[:, m] = 0
        extra.append(V)
        labels.append(np.asarray(y)[present])
    return np.concatenate(extra), np.concatenate(labels)


def augment_d(X, y, vocab: Vocabulary) -> tuple[np.ndarray, np.ndarray]:
    """Training set for the D base: every non-empty single-subtree projection."""
    X = np.asarray(X)
    extra, labels = [], []
    for m in _range_masks(vocab):
        present = X[:, m].any(axis=1)
        V = np.where(m, X[present], 0).astype(X.dtype)
        extra.append(V)
        labels.append(np.asarray(y)[present])
    return np.concatenate(extra), np.concatenate(labels)


def train_ensemble(X, y, vocab: Vocabulary, mode: str, cfg: TrainConfig) -> EnsembleWrapper:
    from .train import fit_arrays

    Xa, ya = (augment_ab if mode == "AB" else augment_d)(X, y, vocab)
    return EnsembleWrapper(fit_arrays(Xa, ya, cfg), mode, vocab)


def exhaustive_min_deletion(model: BoostedTree, x, limit: int | None = None):
    """Reference answer by plain subset enumeration (small inputs only)."""
    x = np.asarray(x)
    bits = [int(i) for i in np.flatnonzero(x)]
    for k in range(0, (len(bits) if limit is None else limit) + 1):
        for subset in combinations(bits, k):
            z = x.copy()
            z[list(subset)] = 0
            if model.score(z[None])[0] <= 0:
                return sorted(subset), k
    raise Infeasible("no subset evades")
