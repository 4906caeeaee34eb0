"""Structural-path vocabulary, binary feature vectors and subtree distance."""
from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .doctree import DocTree, Path, parse_path, path_str, root_subtree_forms
from .errors import DimensionMismatch, EmptyVocabulary, SchemaViolation


@dataclass(frozen=True)
class Vocabulary:
    """Sorted structural paths plus the contiguous index range of each root child.

    Paths are ordered by their key tuples, so all paths below one root child
    sit next to each other and ``subtree_ranges`` partitions ``[0, dim)``.
    """

    paths: tuple
    index_of: dict = field(compare=False, repr=False)
    subtree_ranges: dict = field(compare=False, repr=False)

    @classmethod
    def from_paths(cls, paths: Iterable[Path]) -> "Vocabulary":
        ordered = tuple(sorted({tuple(p) for p in paths if p}))
        index_of = {p: i for i, p in enumerate(ordered)}
        ranges: dict[str, tuple[int, int]] = {}
        for i, p in enumerate(ordered):
            start, _ = ranges.get(p[0], (i, i))
            ranges[p[0]] = (start, i + 1)
        return cls(ordered, index_of, ranges)

    @property
    def dim(self) -> int:
        return len(self.paths)

    @property
    def n_subtrees(self) -> int:
        return len(self.subtree_ranges)

    @property
    def subtree_names(self) -> list[str]:
        return list(self.subtree_ranges)

    def range_mask(self, names: Iterable[str]) -> np.ndarray:
        mask = np.zeros(self.dim, dtype=bool)
        for name in names:
            a, b = self.subtree_ranges[name]
            mask[a:b] = True
        return mask

    def digest(self) -> str:
        return hashlib.sha256("\n".join(path_str(p) for p in self.paths).encode()).hexdigest()[:16]


def build_vocabulary(corpus: Sequence[DocTree], min_df: int = 1) -> Vocabulary:
    """Every structural path found in at least ``min_df`` trees of ``corpus``."""
    if min_df < 1:
        raise ValueError("min_df must be at least 1")
    if not corpus:
        raise EmptyVocabulary("empty corpus")
    df = Counter()
    for tree in corpus:
        df.update(tree.paths)
    vocab = Vocabulary.from_paths(p for p, n in df.items() if n >= min_df)
    if vocab.dim == 0:
        raise EmptyVocabulary(f"no path occurs in {min_df} or more documents")
    return vocab


def extract_features(tree: DocTree, vocab: Vocabulary) -> np.ndarray:
    """Binary vector with bit i set iff ``vocab.paths[i]`` occurs in ``tree``."""
    x = np.zeros(vocab.dim, dtype=np.uint8)
    for p in tree.paths:
        i = vocab.index_of.get(p)
        if i is not None:
            x[i] = 1
    return x


def set_bits(x: np.ndarray) -> list[int]:
    """Sparse view of a binary vector."""
    return np.flatnonzero(np.asarray(x)).tolist()


def subtree_distance(a: DocTree, b: DocTree) -> int:
    """Number of root-child names whose subtrees differ (a missing side counts)."""
    fa, fb = root_subtree_forms(a), root_subtree_forms(b)
    return sum(fa.get(k) != fb.get(k) for k in set(fa) | set(fb))


def l0_distance(x, y) -> int:
    x, y = np.asarray(x), np.asarray(y)
    if x.shape != y.shape:
        raise DimensionMismatch(f"vectors of length {x.shape} and {y.shape}")
    return int(np.count_nonzero(x != y))


# -- files -------------------------------------------------------------------


def save_vocabulary(vocab: Vocabulary) -> str:
    lines = [f"# dim={vocab.dim} n_subtrees={vocab.n_subtrees}"]
    lines += [path_str(p) for p in vocab.paths]
    return "\n".join(lines) + "\n"


def load_vocabulary(text: str) -> Vocabulary:
    lines = text.splitlines()
    heads = [line for line in lines if line.startswith("# dim=")]
    if not heads:
        raise SchemaViolation("vocabulary file lacks its header line")
    header = dict(kv.split("=") for kv in heads[0][2:].split())
    paths = [parse_path(line) for line in lines if line.strip() and not line.startswith("#")]
    vocab = Vocabulary.from_paths(paths)
    if vocab.paths != tuple(paths) or vocab.dim != int(header["dim"]) \
            or vocab.n_subtrees != int(header["n_subtrees"]):
        raise SchemaViolation("vocabulary file is not sorted or disagrees with its header")
    return vocab


def save_features(X: np.ndarray, y: Sequence[int], ids: Sequence[str] | None = None) -> str:
    """Sparse feature lines ``<label> i1 i2 ...`` with an optional ``# id`` suffix."""
    out = []
    for k, (row, label) in enumerate(zip(X, y)):
        line = " ".join([str(int(label))] + [str(i) for i in set_bits(row)])
        if ids is not None:
            line += f" # {ids[k]}"
        out.append(line)
    return "\n".join(out) + ("\n" if out else "")


def load_features(text: str, dim: int) -> tuple[np.ndarray, np.ndarray, list[str]]:
    rows, labels, ids = [], [], []
    for n, line in enumerate(text.splitlines()):
        if not line.strip() or line.startswith("#"):
            continue
        body, _, doc_id = line.partition("#")
        parts = body.split()
        try:
            label, idx = int(parts[0]), [int(i) for i in parts[1:]]
        except (ValueError, IndexError) as exc:
            raise SchemaViolation(f"feature line {n + 1}: {exc}") from exc
        if label not in (0, 1) or any(i < 0 or i >= dim for i in idx):
            raise SchemaViolation(f"feature line {n + 1}: label or index out of range")
        row = np.zeros(dim, dtype=np.uint8)
        row[idx] = 1
        rows.append(row)
        labels.append(label)
        ids.append(doc_id.strip() or str(len(ids)))
    X = np.array(rows, dtype=np.uint8).reshape(len(rows), dim)
    return X, np.array(labels, dtype=np.int64), ids
