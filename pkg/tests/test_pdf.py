import pytest

from oracles import FIG1A
from verdoc.doctree import DocNode, DocTree, load_tree, make_tree
from verdoc.errors import MalformedDocument, Unserializable
from verdoc.pdf import parse_pdf, serialize_pdf


def test_fig1_round_trip():
    t = parse_pdf(FIG1A)
    again = parse_pdf(serialize_pdf(t))
    assert again.paths == t.paths
    assert serialize_pdf(t).startswith(b"%PDF-1.4")


def test_empty_root_round_trip():
    t = make_tree({})
    assert parse_pdf(serialize_pdf(t)).paths == frozenset()


def test_corpus_round_trip(small_corpus):
    for _, tree, _ in small_corpus[:50]:
        assert parse_pdf(serialize_pdf(tree)).paths == tree.paths


def test_xref_missing_falls_back_to_scan():
    body = FIG1A.replace(b"trailer", b"xref\n0 1\n0000000000 65535 f \ntrailer")
    assert parse_pdf(body).paths == parse_pdf(FIG1A).paths


def test_no_root_is_malformed():
    with pytest.raises(MalformedDocument):
        parse_pdf(b"%PDF-1.4\n1 0 obj << /Type /Catalog >> endobj\n")


def test_unserializable_number():
    t = DocTree("r", {"r": DocNode("dictionary", (("A", "n"),)), "n": DocNode("number", value=float("nan"))})
    with pytest.raises(Unserializable):
        serialize_pdf(t)


def test_unreachable_objects_stay_in_store():
    data = FIG1A.replace(b"trailer", b"9 0 obj << /Orphan 1 >> endobj\ntrailer")
    t = parse_pdf(data)
    assert "9 0" in t.nodes and "9 0" not in t.tree_edges
    assert load_tree
