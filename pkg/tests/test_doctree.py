import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import FIG1A, FIG1_PATHS, bfs_depths, graph_paths
from verdoc.doctree import (TRIGGER_POINTS, DocNode, ExploitMarker, Ref, Shared, Stream, delete_subtree,
                            insert_subtree, is_malicious_proxy, load_tree, make_tree, move_exploit,
                            replace_subtree, save_tree, structural_form)
from verdoc.errors import KindMismatch, NoPayloadAtSource, PathNotFound, SchemaViolation
from verdoc.pdf import parse_pdf
from verdoc.synth import malicious_tree

KEYS = ["A", "B", "C", "Kids", "JS"]


def spec_strategy():
    leaf = st.one_of(st.integers(-5, 5), st.sampled_from(["/N", "txt"]), st.booleans())
    return st.recursive(leaf, lambda kids: st.one_of(
        st.dictionaries(st.sampled_from(KEYS), kids, max_size=3),
        st.lists(kids, max_size=2)), max_leaves=12)


trees = st.dictionaries(st.sampled_from(KEYS), spec_strategy(), min_size=1, max_size=4).map(make_tree)


def test_fig1_parse_and_schema_cross_check():
    parsed = parse_pdf(FIG1A)
    assert parsed.root_children() == ["OpenAction", "Pages", "Type"]
    assert set(parsed.paths) == FIG1_PATHS
    by_hand = make_tree({"Type": "/Catalog",
                         "OpenAction": {"S": "/JavaScript", "JS": Stream("x", {"Length": 27, "Filter": "/FlateDecode"})},
                         "Pages": Shared("p", {"Type": "/Pages", "Count": 1,
                                               "Kids": [{"Type": "/Page", "Parent": Ref("p")}]})})
    assert by_hand.paths == parsed.paths
    assert load_tree(save_tree(by_hand)).paths == parsed.paths


def test_mutual_references_appear_once_at_shortest_depth():
    t = parse_pdf(FIG1A)
    depth = bfs_depths(t)
    assert t.depths == {n: depth[n] for n in t.depths}
    # objects 3 and 4 refer to each other; each sits once in the spanning tree
    assert sorted(n for n in t.tree_edges if n in ("3 0", "4 0")) == ["3 0", "4 0"]
    assert t.depths["3 0"] == 1 and t.depths["4 0"] == 3


def test_minimal_document():
    t = parse_pdf(b"%PDF-1.4\n1 0 obj << /Type /Catalog >> endobj\ntrailer << /Root 1 0 R >>\n")
    assert t.root_children() == ["Type"]


@settings(max_examples=60, deadline=None)
@given(trees)
def test_spanning_structure_matches_independent_bfs(t):
    assert set(t.paths) == graph_paths(t)
    depth = bfs_depths(t)
    for nid, d in t.depths.items():
        assert d == depth[nid]


@settings(max_examples=60, deadline=None)
@given(trees)
def test_json_round_trip(t):
    back = load_tree(save_tree(t))
    assert back == t
    assert save_tree(back) == save_tree(t)


def test_empty_root_and_schema_errors():
    t = load_tree('{"root": "r", "nodes": {"r": {"kind": "dictionary", "entries": {}}}}')
    assert t.root_children() == []
    with pytest.raises(SchemaViolation):
        load_tree('{"root": "r", "nodes": {}}')
    with pytest.raises(SchemaViolation):
        load_tree('{"root": "r", "nodes": {"r": {"kind": "dictionary", "entries": {"A": "zz"}}}}')


def test_delete_payload_keeps_shared_objects():
    t = parse_pdf(FIG1A)
    d = delete_subtree(t, ("OpenAction",))
    assert "2 0" not in d.nodes
    assert {"3 0", "4 0"} <= set(d.nodes)
    assert d.root_children() == ["Pages", "Type"]


def test_delete_node_referenced_twice_survives():
    t = make_tree({"A": Shared("s", {"X": 1}), "B": Ref("s")})
    d = delete_subtree(t, ("A",))
    assert "ss" in d.nodes
    assert d.paths == {("B",), ("B", "X")}


def test_delete_only_child_and_missing_path():
    t = make_tree({"A": {"X": 1}})
    assert delete_subtree(t, ("A",)).root_children() == []
    with pytest.raises(PathNotFound):
        delete_subtree(t, ("Nope",))


def test_insert_metadata_then_delete_restores():
    t = make_tree({"Type": "/Catalog", "Pages": {"Count": 0}})
    meta = make_tree({"Length": 3, "Type": "/Metadata"})
    ins = insert_subtree(t, (), "Metadata", meta)
    assert ins.paths - t.paths == {("Metadata",), ("Metadata", "Length"), ("Metadata", "Type")}
    assert delete_subtree(ins, ("Metadata",)).paths == t.paths
    with pytest.raises(KindMismatch):
        insert_subtree(make_tree({"L": [1]}), ("L",), "k", meta)


@settings(max_examples=100, deadline=None)
@given(trees, st.data())
def test_replace_equals_delete_then_insert(t, data):
    keyed = sorted(p for p in t.paths if t.keyed_edges_at(p) and len(t.keyed_edges_at(p)) == 1)
    if not keyed:
        return
    path = data.draw(st.sampled_from(keyed))
    if not any(t.nodes[n].kind in ("dictionary", "stream") for n in t.nodes_at(path[:-1])):
        return
    new = make_tree({"Z": 1})
    a = replace_subtree(t, path, new)
    b = insert_subtree(delete_subtree(t, path), path[:-1], path[-1], new)
    assert structural_form(a) == structural_form(b)


@pytest.mark.parametrize("src", TRIGGER_POINTS)
def test_move_exploit_keeps_payload_everywhere(src):
    rng = np.random.default_rng(0)
    t = malicious_tree(rng, src)
    assert is_malicious_proxy(t)
    for dst in TRIGGER_POINTS:
        moved = move_exploit(t, src, dst)
        assert is_malicious_proxy(moved)
        if dst != src:
            assert any(p[:len(dst)] == dst for p in moved.paths)
    assert move_exploit(t, src, src) is t


def test_proxy_false_after_deleting_trigger_and_move_errors():
    t = malicious_tree(np.random.default_rng(1), ("OpenAction", "JS"))
    assert not is_malicious_proxy(delete_subtree(t, ("OpenAction",)))
    with pytest.raises(NoPayloadAtSource):
        move_exploit(t, ("Pages", "Kids", "AA"), ("OpenAction", "JS"))


def test_marker_requires_trigger_points():
    with pytest.raises(ValueError):
        ExploitMarker("x", trigger_points=(("OpenAction", "JS"),))
    with pytest.raises(ValueError):
        DocNode("reference")
