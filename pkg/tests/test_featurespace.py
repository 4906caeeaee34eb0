import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import FIG1A, FIG1_PATHS, graph_paths
from verdoc.doctree import delete_subtree, insert_subtree, make_tree, root_subtree_forms
from verdoc.errors import DimensionMismatch, EmptyVocabulary, SchemaViolation
from verdoc.featurespace import (Vocabulary, build_vocabulary, extract_features, l0_distance, load_features,
                                 load_vocabulary, save_features, save_vocabulary, set_bits, subtree_distance)
from verdoc.pdf import parse_pdf


def test_ranges_partition(corpus400):
    vocab = corpus400["vocab"]
    spans = sorted(vocab.subtree_ranges.values())
    assert spans[0][0] == 0 and spans[-1][1] == vocab.dim
    assert all(a[1] == b[0] for a, b in zip(spans, spans[1:]))
    for name, (a, b) in vocab.subtree_ranges.items():
        assert all(p[0] == name for p in vocab.paths[a:b])
    assert list(vocab.paths) == sorted(vocab.paths)


def test_single_tree_vocabulary():
    t = parse_pdf(FIG1A)
    assert set(build_vocabulary([t]).paths) == FIG1_PATHS


def test_min_df_matches_bruteforce(small_corpus):
    trees = [t for _, t, _ in small_corpus[:5]] + [t for _, t, _ in small_corpus[-5:]]
    counts = {}
    for t in trees:
        for p in graph_paths(t):
            counts[p] = counts.get(p, 0) + 1
    want = sorted(p for p, c in counts.items() if c >= 3)
    assert list(build_vocabulary(trees, min_df=3).paths) == want


def test_vocabulary_errors():
    with pytest.raises(EmptyVocabulary):
        build_vocabulary([])
    with pytest.raises(EmptyVocabulary):
        build_vocabulary([make_tree({"A": 1})], min_df=2)
    with pytest.raises(ValueError):
        build_vocabulary([make_tree({"A": 1})], min_df=0)


def test_fig1_feature_bits():
    t = parse_pdf(FIG1A)
    vocab = Vocabulary.from_paths(FIG1_PATHS | {("Metadata",), ("Pages", "Kids", "Contents")})
    x = extract_features(t, vocab)
    assert {vocab.paths[i] for i in set_bits(x)} == FIG1_PATHS
    assert not extract_features(make_tree({}), vocab).any()


def test_subtree_distance_examples():
    a = parse_pdf(FIG1A)
    assert subtree_distance(a, a) == 0
    meta = make_tree({"Type": "/Metadata", "Subtype": "/XML"})
    assert subtree_distance(a, insert_subtree(a, (), "Metadata", meta)) == 1
    page = make_tree({"Type": "/Page"})
    b = insert_subtree(a, ("Pages",), "Extra", page)
    b = delete_subtree(b, ("OpenAction",))
    assert subtree_distance(a, b) == 2


def test_distance_axioms(small_corpus):
    trees = [t for _, t, _ in small_corpus[:12]]
    for a, b in itertools.product(trees, repeat=2):
        assert subtree_distance(a, b) == subtree_distance(b, a)
        assert (subtree_distance(a, b) == 0) == (root_subtree_forms(a) == root_subtree_forms(b))
    assert all(subtree_distance(a, a) == 0 for a in trees)
    for a, b, c in itertools.combinations(trees, 3):
        assert subtree_distance(a, c) <= subtree_distance(a, b) + subtree_distance(b, c)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 1), min_size=1, max_size=40), st.data())
def test_l0_is_popcount_of_xor(xs, data):
    x = np.array(xs, dtype=np.uint8)
    y = np.array(data.draw(st.lists(st.integers(0, 1), min_size=len(xs), max_size=len(xs))), dtype=np.uint8)
    assert l0_distance(x, y) == bin(int("".join(map(str, x ^ y)), 2)).count("1")
    assert l0_distance(x, x) == 0
    assert l0_distance(x, 1 - x) == len(x)


def test_l0_shape_mismatch():
    with pytest.raises(DimensionMismatch):
        l0_distance([0, 1], [0, 1, 0])


def test_file_round_trips(corpus400):
    vocab = corpus400["vocab"]
    assert load_vocabulary(save_vocabulary(vocab)).paths == vocab.paths
    X, y = corpus400["X"][:20], corpus400["y"][:20]
    X2, y2, ids = load_features(save_features(X, y, [f"d{i}" for i in range(20)]), vocab.dim)
    assert np.array_equal(X, X2) and np.array_equal(y, y2) and ids[3] == "d3"
    with pytest.raises(SchemaViolation):
        load_features("0 9999\n", vocab.dim)
    with pytest.raises(SchemaViolation):
        load_vocabulary("Pages\n")
