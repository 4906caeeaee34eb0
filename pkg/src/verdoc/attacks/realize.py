"""Turn an evasive feature vector back into a document."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from ..doctree import (DocNode, DocTree, KEYED_KINDS, delete_subtree, fragment, graft_at_path, path_str,
                       reference_closure)
from ..errors import NoDonorForPath
from ..featurespace import Vocabulary, extract_features


def _prune(frag: DocTree, base: tuple, keep: set) -> DocTree:
    """Drop keyed entries of ``frag`` whose full path (``base`` + own path) is not in ``keep``."""
    paths = frag.node_paths
    nodes = {}
    for nid in frag.bfs_order:
        node = frag.nodes[nid]
        if node.kind in KEYED_KINDS:
            entries = tuple((k, c) for k, c in node.entries
                            if c in paths and base + paths[nid] + (k,) in keep)
            node = DocNode(node.kind, entries, node.value, node.stream_meta, node.target)
        nodes[nid] = node
    live = reference_closure(DocTree(frag.root, nodes), frag.root)
    return DocTree(frag.root, {n: nodes[n] for n in live})


def _donor_object(donors: Sequence[DocTree], path: tuple, keep: set) -> DocTree | None:
    """Object at ``path`` with the fewest tree children over all donors."""
    best = None
    for d in donors:
        for nid in d.nodes_at(path):
            frag = _prune(fragment(d, nid, follow="tree"), path, keep)
            size = len(frag.tree_children(frag.root))
            if best is None or size < best[0]:
                best = (size, frag)
    return None if best is None else best[1]


def realize_vector(seed_tree: DocTree, target, vocab: Vocabulary, donors: Sequence[DocTree],
                   return_residual: bool = False):
    """Edit ``seed_tree`` so that its features approach ``target``.

    Paths to clear are deleted shortest first; missing paths are filled with
    the donor object that has the fewest children, trimmed to the paths the
    target asks for.  Intermediate dictionaries created on the way may leave a
    residual L0 distance, which is returned when ``return_residual`` is set.
    """
    target = np.asarray(target, dtype=np.uint8)
    x0 = extract_features(seed_tree, vocab)
    want = {vocab.paths[i] for i in np.flatnonzero(target)}
    tree = seed_tree
    for i in sorted(np.flatnonzero((x0 == 1) & (target == 0)), key=lambda i: (len(vocab.paths[i]), vocab.paths[i])):
        p = vocab.paths[i]
        if tree.keyed_edges_at(p):
            tree = delete_subtree(tree, p)
    for i in sorted(np.flatnonzero(target), key=lambda i: (len(vocab.paths[i]), vocab.paths[i])):
        p = vocab.paths[i]
        if p in tree.paths:
            continue
        obj = _donor_object(donors, p, want)
        if obj is None:
            raise NoDonorForPath(path_str(p))
        tree = graft_at_path(tree, p, obj)
    if return_residual:
        return tree, int((extract_features(tree, vocab) != target).sum())
    return tree
