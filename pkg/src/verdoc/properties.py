"""Robustness properties as sets of box regions over binary feature vectors.

A deletion property of distance k allows clearing any bits inside k of the
subtrees that are present in the seed; an insertion property of distance k
allows setting any bits inside k subtrees (present or not).  Each choice of
subtrees gives one box ``lower <= x <= upper``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionMismatch, SchemaViolation
from .featurespace import Vocabulary, set_bits

DELETION = "SubtreeDeletion"
INSERTION = "SubtreeInsertion"


@dataclass(frozen=True)
class PropertySpec:
    kind: str
    distance: int
    name: str = ""

    def __post_init__(self):
        if self.kind not in (DELETION, INSERTION):
            raise ValueError(f"unknown property kind {self.kind!r}")
        if self.distance < 0:
            raise ValueError("distance must be non-negative")

    @property
    def label(self) -> str:
        return self.name or f"{'Del' if self.kind == DELETION else 'Ins'}{self.distance}"


def presets(n_subtrees: int) -> dict[str, PropertySpec]:
    """Properties A to E for a feature space with ``n_subtrees`` root children."""
    n = n_subtrees
    return {
        "A": PropertySpec(DELETION, 1, "A"),
        "B": PropertySpec(INSERTION, 1, "B"),
        "C": PropertySpec(DELETION, 2, "C"),
        "D": PropertySpec(INSERTION, max(n - 1, 0), "D"),
        "E": PropertySpec(INSERTION, n, "E"),
    }


def resolve(names: Iterable[str], vocab: Vocabulary) -> list[PropertySpec]:
    table = presets(vocab.n_subtrees)
    out = []
    for name in names:
        if name not in table:
            raise ValueError(f"unknown property {name!r}; expected one of {sorted(table)}")
        out.append(table[name])
    return out


@dataclass(frozen=True)
class IntervalRegion:
    lower: np.ndarray
    upper: np.ndarray
    origin: str = ""
    subtree_choice: tuple = ()
    seed: np.ndarray | None = field(default=None, compare=False, repr=False)

    @property
    def free(self) -> np.ndarray:
        return np.flatnonzero(self.lower != self.upper)


def regions_for(x, vocab: Vocabulary, spec: PropertySpec, origin: str = "") -> list[IntervalRegion]:
    """Every box region of ``spec`` around the seed vector ``x``."""
    x = np.asarray(x, dtype=np.uint8)
    if x.shape != (vocab.dim,):
        raise DimensionMismatch(f"feature vector of length {x.shape} for vocabulary dim {vocab.dim}")
    names = vocab.subtree_names
    if spec.distance == 0:
        return [IntervalRegion(x.copy(), x.copy(), origin, (), x)]
    out = []
    if spec.kind == DELETION:
        present = [s for s in names if x[slice(*vocab.subtree_ranges[s])].any()]
        for choice in combinations(present, spec.distance):
            lower = x.copy()
            lower[vocab.range_mask(choice)] = 0
            out.append(IntervalRegion(lower, x.copy(), origin, choice, x))
    else:
        for choice in combinations(names, min(spec.distance, len(names))):
            upper = x.copy()
            upper[vocab.range_mask(choice)] = 1
            out.append(IntervalRegion(x.copy(), upper, origin, choice, x))
    return out


def region_arrays(x, vocab: Vocabulary, spec: PropertySpec) -> tuple[np.ndarray, np.ndarray]:
    """Stacked ``(lower, upper)`` arrays of shape (regions, dim) for one seed."""
    regs = regions_for(x, vocab, spec)
    if not regs:
        return np.zeros((0, vocab.dim), np.uint8), np.zeros((0, vocab.dim), np.uint8)
    return np.stack([r.lower for r in regs]), np.stack([r.upper for r in regs])


def contains(region: IntervalRegion, x) -> bool:
    x = np.asarray(x)
    if x.shape != region.lower.shape:
        raise DimensionMismatch(f"point of shape {x.shape} vs region of shape {region.lower.shape}")
    return bool(np.all(region.lower <= x) and np.all(x <= region.upper))


def sample_region(region: IntervalRegion, seed: int, n: int) -> list[np.ndarray]:
    """Members of ``region``: its corners, the seed if inside, then uniform draws up to ``n``.

    The corners and seed are always returned, so fewer than three requested
    points can still yield three.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    fixed = [region.lower, region.upper]
    if region.seed is not None and contains(region, region.seed):
        fixed.append(np.asarray(region.seed, dtype=np.uint8))
    out: list[np.ndarray] = []
    for p in fixed:
        if not any(np.array_equal(p, q) for q in out):
            out.append(p.copy())
    rng = np.random.default_rng(seed)
    free = region.free
    while len(out) < n:
        s = region.lower.copy()
        s[free] = rng.integers(0, 2, size=free.size)
        out.append(s)
    return out


def dump_regions(regions: Sequence[IntervalRegion]) -> str:
    lines = []
    for r in regions:
        choice = "+".join(r.subtree_choice) or "-"
        lo = " ".join(map(str, set_bits(r.lower)))
        up = " ".join(map(str, set_bits(r.upper)))
        lines.append(f"{r.origin or '-'} {choice} {lo} | {up}".replace("  ", " "))
    return "\n".join(lines) + ("\n" if lines else "")


def load_regions(text: str, dim: int) -> list[IntervalRegion]:
    out = []
    for n, line in enumerate(text.splitlines()):
        if not line.strip():
            continue
        left, sep, right = line.partition("|")
        head = left.split()
        if not sep or len(head) < 2:
            raise SchemaViolation(f"region line {n + 1} is malformed")
        lower = np.zeros(dim, np.uint8)
        upper = np.zeros(dim, np.uint8)
        lower[[int(i) for i in head[2:]]] = 1
        upper[[int(i) for i in right.split()]] = 1
        choice = () if head[1] == "-" else tuple(head[1].split("+"))
        out.append(IntervalRegion(lower, upper, "" if head[0] == "-" else head[0], choice))
    return out
