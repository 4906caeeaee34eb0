"""Genetic-programming evasion over document trees, plus adaptive variants.

Each generation mutates every variant, scores it with the model, and checks
the proxy oracle.  A variant evades once the oracle still sees the payload and
its fitness (benign minus malicious logit for networks) reaches the
threshold.  Variants that lose the payload are replaced in three equal shares:
copies of the best variant seen so far, variants with distinct high fitness,
and random picks from the last few generations plus the seed.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from ..baselines import BoostedTree, EnsembleWrapper, _range_masks, _variants
from ..doctree import (CONTAINER_KINDS, KEYED_KINDS, DocTree, ExploitMarker, delete_edge, fragment,
                       insert_at_node, is_malicious_proxy, move_exploit, path_str, payload_nodes,
                       replace_node, with_marker)
from ..errors import BudgetExhausted, KindMismatch, NoPayloadAtSource, PathNotFound
from ..featurespace import Vocabulary, extract_features
from ..mlp import MALICIOUS, MlpModel, fitness_score
from ..mlp import predict as mlp_predict
from .result import AttackResult

POLICIES = ("base", "move", "scatter", "combo")
_OPS = {
    "base": ("delete", "insert", "replace"),
    "move": ("delete", "move"),
    "scatter": ("delete", "insert", "replace"),
    "combo": ("delete", "insert", "replace", "move"),
}


@dataclass
class EvoConfig:
    population: int = 48
    generations: int = 20  # per round
    rounds: int = 5  # round budget per seed
    threshold: float = 0.0
    mutation_rate: float = 0.1
    seed: int = 0
    pool_window: int = 4
    n_donors: int = 4
    policy: str = "base"

    def __post_init__(self):
        if self.population <= 0 or self.generations <= 0 or self.rounds <= 0:
            raise ValueError("population, generations and rounds must be positive")
        if not 0 < self.mutation_rate <= 1:
            raise ValueError("mutation rate must lie in (0, 1]")
        if self.policy not in POLICIES:
            raise ValueError(f"policy must be one of {POLICIES}")


# -- donor genomes -----------------------------------------------------------


class GenomeTrie:
    """Prefix trie of benign subtrees keyed by the structural path they sit at."""

    def __init__(self, donors: Sequence[DocTree], vocab: Vocabulary):
        self.vocab = vocab
        self.donors = list(donors)
        self._root: dict = {"kids": {}, "genomes": []}
        self._cache: dict = {}
        valid = set(vocab.paths)
        for d, tree in enumerate(self.donors):
            for nid in tree.bfs_order[1:]:
                label = tree.tree_edges[nid][1]
                path = tree.node_paths[nid]
                if isinstance(label, str) and path in valid:
                    self._node(path, create=True)["genomes"].append((d, nid))

    def _node(self, path, create=False):
        cur = self._root
        for key in path:
            if key not in cur["kids"]:
                if not create:
                    return None
                cur["kids"][key] = {"kids": {}, "genomes": []}
            cur = cur["kids"][key]
        return cur

    def genome(self, ref) -> DocTree:
        if ref not in self._cache:
            d, nid = ref
            self._cache[ref] = fragment(self.donors[d], nid, follow="tree")
        return self._cache[ref]

    def genomes_at(self, path) -> list:
        node = self._node(tuple(path))
        return list(node["genomes"]) if node else []

    def child_genomes(self, path) -> list[tuple[str, tuple]]:
        """(key, genome ref) for every genome one level below ``path``."""
        node = self._node(tuple(path))
        if node is None:
            return []
        return [(k, g) for k, sub in sorted(node["kids"].items()) for g in sub["genomes"]]

    def top_keys(self) -> list[str]:
        return sorted(k for k, sub in self._root["kids"].items() if self._has_genome(sub))

    def _has_genome(self, node) -> bool:
        return bool(node["genomes"]) or any(self._has_genome(s) for s in node["kids"].values())

    def all_paths(self) -> list[tuple]:
        out, stack = [], [((), self._root)]
        while stack:
            path, node = stack.pop()
            if node["genomes"]:
                out.append(path)
            stack.extend((path + (k,), s) for k, s in node["kids"].items())
        return sorted(out)


def pick_donors(model, corpus: Sequence[DocTree], vocab: Vocabulary, n: int) -> list[DocTree]:
    """The ``n`` documents the model finds most benign."""
    if not corpus:
        return []
    X = np.stack([extract_features(t, vocab) for t in corpus])
    order = np.argsort(-model_fitness(model, X), kind="stable")
    return [corpus[i] for i in order[:n]]


# -- scoring -----------------------------------------------------------------


def model_fitness(model, X) -> np.ndarray:
    """Per-row fitness; a row evades when its fitness is at least 0."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if isinstance(model, MlpModel):
        return fitness_score(model, X)
    if isinstance(model, BoostedTree):
        return -model.score(X)
    if isinstance(model, EnsembleWrapper):
        V = _variants(X, _range_masks(model.vocab), keep=model.mode == "D")
        return fitness_score(model.base, V.reshape(-1, X.shape[1])).reshape(len(X), -1).min(axis=1)
    if callable(model):
        return np.asarray(model(X), dtype=np.float64)
    raise TypeError(f"cannot score with {type(model).__name__}")


def model_predict(model, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X))
    if isinstance(model, MlpModel):
        return mlp_predict(model, X)
    if isinstance(model, (BoostedTree, EnsembleWrapper)):
        return np.asarray(model.predict(X))
    return (model_fitness(model, X) < 0).astype(np.int64)


# -- variants and mutation ---------------------------------------------------


@dataclass(frozen=True)
class Variant:
    tree: DocTree
    trace: tuple = ()
    fitness: float = -np.inf
    generation: int = 0
    ins_hist: tuple = ()  # sorted (subtree, count) pairs
    del_hist: tuple = ()


def _bump(hist: tuple, key: str) -> tuple:
    d = dict(hist)
    d[key] = d.get(key, 0) + 1
    return tuple(sorted(d.items()))


def _least_touched(hist: tuple, candidates: Sequence[str], rng) -> str | None:
    if not candidates:
        return None
    counts = dict(hist)
    low = min(counts.get(c, 0) for c in candidates)
    tied = [c for c in candidates if counts.get(c, 0) == low]
    return tied[rng.integers(len(tied))]


class _Mutator:
    def __init__(self, trie: GenomeTrie, marker: ExploitMarker, cfg: EvoConfig):
        self.trie = trie
        self.marker = marker
        self.cfg = cfg
        self.ops = _OPS[cfg.policy]
        self.scatter = cfg.policy in ("scatter", "combo")

    def mutate(self, v: Variant, rng) -> Variant:
        tree = v.tree
        loci = tree.bfs_order[1:]
        k = int(rng.binomial(len(loci), self.cfg.mutation_rate))
        if k == 0:
            return v
        chosen = [loci[i] for i in rng.choice(len(loci), size=k, replace=False)]
        trace, ins, dele = list(v.trace), v.ins_hist, v.del_hist
        for nid in chosen:
            op = self.ops[rng.integers(len(self.ops))]
            if self.scatter and op in ("delete", "insert"):
                done = self._scatter(tree, op, ins if op == "insert" else dele, rng)
            elif nid in tree.tree_edges:
                done = self._apply(tree, op, nid, rng)
            else:
                done = None  # locus went away with an earlier deletion
            if done is None:
                continue
            tree, rec = done
            trace.append(rec)
            if op == "insert":
                ins = _bump(ins, rec[2])
            elif op == "delete":
                dele = _bump(dele, rec[2])
        return Variant(tree, tuple(trace), v.fitness, v.generation, ins, dele)

    def _apply(self, tree: DocTree, op: str, nid: str, rng):
        try:
            if op == "delete":
                return self._delete(tree, nid)
            if op == "insert":
                return self._insert(tree, nid, rng)
            if op == "replace":
                return self._replace(tree, nid, rng)
            return self._move(tree, rng)
        except (KindMismatch, PathNotFound, NoPayloadAtSource):
            return None

    @staticmethod
    def _top(tree: DocTree, nid: str) -> str:
        path = tree.node_paths[nid]
        return path[0] if path else ""

    def _delete(self, tree, nid):
        parent, label = tree.tree_edges[nid]
        rec = ("delete", path_str(tree.node_paths[nid]), self._top(tree, nid))
        return delete_edge(tree, parent, label), rec

    def _insert(self, tree, nid, rng):
        node = tree.nodes[nid]
        host = nid if node.kind in CONTAINER_KINDS else tree.tree_edges[nid][0]
        hpath = tree.node_paths[host]
        if tree.nodes[host].kind in KEYED_KINDS:
            options = self.trie.child_genomes(hpath)
            if not options:
                return None
            key, ref = options[rng.integers(len(options))]
            path = hpath + (key,)
        else:
            refs = self.trie.genomes_at(hpath)
            if not refs:
                return None
            key, ref = None, refs[rng.integers(len(refs))]
            path = hpath
        out = insert_at_node(tree, host, key, self.trie.genome(ref))
        return out, ("insert", path_str(path), path[0] if path else "")

    def _replace(self, tree, nid, rng):
        path = tree.node_paths[nid]
        refs = self.trie.genomes_at(path)
        if not refs:
            return None
        out = replace_node(tree, nid, self.trie.genome(refs[rng.integers(len(refs))]))
        return out, ("replace", path_str(path), path[0])

    def _move(self, tree, rng):
        trig = self.marker.trigger_points
        hosts = [t for t in trig if payload_nodes(tree, self.marker, [t])]
        if not hosts:
            return None
        src = hosts[0]
        others = [t for t in trig if t != src]
        dst = others[rng.integers(len(others))]
        out = move_exploit(tree, src, dst, self.marker)
        return out, ("move", path_str(src), path_str(dst))

    def _scatter(self, tree: DocTree, op: str, hist: tuple, rng):
        """Insert or delete inside the subtree this lineage has touched least."""
        present = [k for k, _ in tree.tree_children(tree.root) if isinstance(k, str)]
        if op == "delete":
            cands = sorted(set(present))
        else:
            cands = sorted(set(present) | set(self.trie.top_keys()))
        # try subtrees from least to most touched until an edit applies
        tried: list[str] = []
        while len(tried) < len(cands):
            s = _least_touched(hist, [c for c in cands if c not in tried], rng)
            tried.append(s)
            done = self._in_subtree(tree, op, s, rng)
            if done is not None:
                return done
        return None

    def _in_subtree(self, tree: DocTree, op: str, s: str, rng):
        tops = [c for k, c in tree.tree_children(tree.root) if k == s]
        nodes = tree.descendants(tops[0]) if tops else []
        if op == "delete":
            return self._apply(tree, op, nodes[rng.integers(len(nodes))], rng) if nodes else None
        if not nodes:
            refs = self.trie.genomes_at((s,))
            if not refs:
                return None
            out = insert_at_node(tree, tree.root, s, self.trie.genome(refs[rng.integers(len(refs))]))
            return out, ("insert", path_str((s,)), s)
        for i in rng.permutation(len(nodes)):
            done = self._apply(tree, "insert", nodes[i], rng)
            if done is not None:
                return done
        return None


# -- the search --------------------------------------------------------------


@dataclass
class EvoState:
    """Everything one seed's search carries from round to round."""

    seed: Variant
    population: list
    rng: np.random.Generator
    best: dict = field(default_factory=dict)  # fitness -> newest variant with it
    pool: list = field(default_factory=list)  # per-generation survivor lists
    generation: int = 0
    result: AttackResult | None = None


def _seed_features(trie: GenomeTrie, tree: DocTree) -> np.ndarray:
    return extract_features(tree, trie.vocab)


def start(model, seed_tree: DocTree, trie: GenomeTrie, cfg: EvoConfig,
          oracle: ExploitMarker | None = None, rng_key=()) -> EvoState:
    marker = oracle or seed_tree.marker
    if marker is None or not is_malicious_proxy(seed_tree, marker):
        raise ValueError("the seed must carry a payload the oracle recognises")
    seed_tree = with_marker(seed_tree, marker)
    f = float(model_fitness(model, _seed_features(trie, seed_tree)[None])[0])
    seed = Variant(seed_tree, fitness=f)
    state = EvoState(seed, [seed] * cfg.population, np.random.default_rng([cfg.seed, *rng_key]))
    state.best[f] = seed
    if f >= cfg.threshold:
        state.result = _result(trie, state, seed, model, marker)
    return state


def _result(trie, state: EvoState, v: Variant, model, marker) -> AttackResult:
    x0 = _seed_features(trie, state.seed.tree)
    x = _seed_features(trie, v.tree)
    ok = bool(v.fitness >= 0 and model_predict(model, x[None])[0] != MALICIOUS)
    return AttackResult(ok, x, v.tree, int((x != x0).sum()), state.generation, list(v.trace),
                        is_malicious_proxy(v.tree, marker), extra={"fitness": v.fitness})


def _shares(n: int) -> list[int]:
    return [n // 3 + (i < n % 3) for i in range(3)]


def step(model, trie: GenomeTrie, cfg: EvoConfig, state: EvoState, marker: ExploitMarker) -> bool:
    """Advance one generation; True once an evasive variant is found."""
    rng = state.rng
    mut = _Mutator(trie, marker, cfg)
    state.generation += 1
    kids = [mut.mutate(v, rng) for v in state.population]
    X = np.stack([_seed_features(trie, v.tree) for v in kids])
    fit = model_fitness(model, X)
    alive = [is_malicious_proxy(v.tree, marker) for v in kids]
    kids = [replace(v, fitness=float(f), generation=state.generation) for v, f in zip(kids, fit)]
    wins = [v for v, a in zip(kids, alive) if a and v.fitness >= cfg.threshold]
    if wins:
        # shortest trace first, then highest fitness
        v = min(wins, key=lambda w: (len(w.trace), -w.fitness))
        state.result = _result(trie, state, v, model, marker)
        return True
    survivors = [v for v, a in zip(kids, alive) if a]
    for v in survivors:
        state.best[v.fitness] = v
    if len(state.best) > cfg.population:
        keep = sorted(state.best, reverse=True)[:cfg.population]
        state.best = {f: state.best[f] for f in keep}
    state.pool = (state.pool + [survivors])[-cfg.pool_window:]
    dead = [i for i, a in enumerate(alive) if not a]
    if dead:
        ranked = [state.best[f] for f in sorted(state.best, reverse=True)]
        pool = [v for gen in state.pool for v in gen] + [state.seed]
        n_best, n_distinct, n_random = _shares(len(dead))
        fill = [ranked[0]] * n_best
        fill += [ranked[i % len(ranked)] for i in range(n_distinct)]
        fill += [pool[rng.integers(len(pool))] for _ in range(n_random)]
        for i, v in zip(dead, fill):
            kids[i] = v
    state.population = kids
    return False


def run_round(model, trie: GenomeTrie, cfg: EvoConfig, state: EvoState, marker: ExploitMarker) -> bool:
    if state.result is not None:
        return state.result.success
    for _ in range(cfg.generations):
        if step(model, trie, cfg, state, marker):
            return True
    return False


def _failure(trie, state: EvoState, model, marker) -> AttackResult:
    ranked = sorted(state.best, reverse=True)
    res = _result(trie, state, state.best[ranked[0]], model, marker)
    res.success = False
    return res


def evolutionary_attack(model, seed_tree: DocTree, donors: GenomeTrie, cfg: EvoConfig | None = None,
                        oracle: ExploitMarker | None = None) -> AttackResult:
    """Evolve ``seed_tree`` until the model calls it benign; raises BudgetExhausted otherwise."""
    cfg = cfg or EvoConfig()
    marker = oracle or seed_tree.marker
    state = start(model, seed_tree, donors, cfg, marker)
    for _ in range(cfg.rounds):
        if run_round(model, donors, cfg, state, marker):
            res = state.result
            res.attack = f"evolution:{cfg.policy}"
            return res
    res = _failure(donors, state, model, marker)
    res.attack = f"evolution:{cfg.policy}"
    raise BudgetExhausted(f"no evasion within {cfg.rounds} rounds", res)


def move_exploit_attack(model, seed_tree, donors, cfg=None, oracle=None) -> AttackResult:
    return evolutionary_attack(model, seed_tree, donors, replace(cfg or EvoConfig(), policy="move"), oracle)


def scatter_attack(model, seed_tree, donors, cfg=None, oracle=None) -> AttackResult:
    return evolutionary_attack(model, seed_tree, donors, replace(cfg or EvoConfig(), policy="scatter"), oracle)


def move_scatter_attack(model, seed_tree, donors, cfg=None, oracle=None) -> AttackResult:
    return evolutionary_attack(model, seed_tree, donors, replace(cfg or EvoConfig(), policy="combo"), oracle)


def _id_key(seed_id: str) -> int:
    # per-seed stream keyed by id, so scheduling and worker count do not matter
    return int.from_bytes(hashlib.sha256(str(seed_id).encode()).digest()[:4], "little")


def campaign(model, seeds: Sequence[DocTree], trie: GenomeTrie, cfg: EvoConfig,
             ids: Sequence[str] | None = None, oracle: ExploitMarker | None = None,
             progress: Callable | None = None) -> list[AttackResult]:
    """Attack several seeds round robin, one round per seed per pass.

    Failed seeds come back with ``success=False`` after ``cfg.rounds`` passes.
    """
    ids = list(ids) if ids is not None else [str(i) for i in range(len(seeds))]
    states, markers = [], []
    for i, tree in enumerate(seeds):
        marker = oracle or tree.marker
        states.append(start(model, tree, trie, cfg, marker, rng_key=(_id_key(ids[i]),)))
        markers.append(marker)
    for r in range(cfg.rounds):
        todo = [i for i, s in enumerate(states) if s.result is None]
        if not todo:
            break
        for i in todo:
            run_round(model, trie, cfg, states[i], markers[i])
        if progress:
            progress(r, sum(s.result is not None for s in states))
    out = []
    for i, s in enumerate(states):
        res = s.result if s.result is not None else _failure(trie, s, model, markers[i])
        res.seed_id = ids[i]
        res.attack = f"evolution:{cfg.policy}"
        out.append(res)
    return out
