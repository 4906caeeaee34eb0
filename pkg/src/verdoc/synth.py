"""Templated synthetic corpus: rich benign documents and lean malicious ones.

Benign documents draw from a catalog of common structures (pages with
resources, outlines, forms, tagging, metadata).  Malicious documents keep a
small page tree, sometimes borrow a few benign structures, and carry a
JavaScript payload stream under one randomly chosen trigger point.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .doctree import (TRIGGER_POINTS, DocTree, ExploitMarker, Ref, Shared, Stream, make_tree,
                      payload_digest, payload_nodes, save_tree, with_marker)


def derive_seed(seed: int, component: str) -> int:
    """Component seed: the first 8 bytes of sha256("<seed>:<component>")."""
    digest = hashlib.sha256(f"{int(seed)}:{component}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _font(rng, i):
    font = {"Type": "/Font", "Subtype": "/Type1", "BaseFont": f"/F{i}"}
    if rng.random() < 0.5:
        font["Encoding"] = "/WinAnsiEncoding"
    if rng.random() < 0.3:
        font["Widths"] = [500, 600, 550]
        font["FirstChar"] = 32
        font["LastChar"] = 34
    if rng.random() < 0.25:
        font["FontDescriptor"] = {"Type": "/FontDescriptor", "Flags": 32, "FontBBox": [0, 0, 1000, 1000],
                                  "ItalicAngle": 0}
    return font


def _resources(rng, rich: bool):
    res = {"ProcSet": ["/PDF", "/Text"]}
    if rng.random() < (0.95 if rich else 0.4):
        res["Font"] = {f"F{i}": _font(rng, i) for i in range(1 + int(rng.integers(2)))}
    if rich and rng.random() < 0.6:
        img = Stream("\x00" * int(rng.integers(8, 32)), {"Type": "/XObject", "Subtype": "/Image", "Width": 4,
                                                          "Height": 4, "ColorSpace": "/DeviceRGB",
                                                          "BitsPerComponent": 8}, "FlateDecode")
        res["XObject"] = {"Im1": img}
    if rich and rng.random() < 0.5:
        res["ExtGState"] = {"GS1": {"Type": "/ExtGState", "CA": 1, "ca": 1}}
    if rich and rng.random() < 0.3:
        res["ColorSpace"] = {"CS0": ["/ICCBased", Stream("icc", {"N": 3})]}
    return res


def _page(rng, rich: bool):
    page = {"Type": "/Page", "Parent": Ref("pages"), "MediaBox": [0, 0, 612, 792],
            "Resources": _resources(rng, rich)}
    text = "BT /F0 12 Tf 72 720 Td (page) Tj ET" * int(rng.integers(1, 4))
    page["Contents"] = Stream(text, {}, "FlateDecode" if rng.random() < 0.5 else None)
    if rich and rng.random() < 0.5:
        page["CropBox"] = [0, 0, 612, 792]
    if rich and rng.random() < 0.4:
        page["Rotate"] = 0
    if rich and rng.random() < 0.45:
        link = {"Type": "/Annot", "Subtype": "/Link", "Rect": [10, 10, 50, 20], "Border": [0, 0, 0]}
        link["A"] = {"S": "/URI", "URI": "http://example.org/"}
        page["Annots"] = [link]
    if rich and rng.random() < 0.3:
        page["Group"] = {"S": "/Transparency", "CS": "/DeviceRGB"}
    if rich and rng.random() < 0.3:
        page["StructParents"] = 0
    return page


def _pages(rng, rich: bool):
    n = int(rng.integers(1, 4))
    kids = [_page(rng, rich) for _ in range(n)]
    return Shared("pages", {"Type": "/Pages", "Count": n, "Kids": kids})


def _benign_parts(rng) -> dict:
    """Optional catalog entries with their inclusion rates for benign files."""
    parts = {}
    if rng.random() < 0.6:
        parts["Outlines"] = {"Type": "/Outlines", "Count": 1,
                             "First": {"Title": "Intro", "Dest": ["/Fit"], "Count": 0}}
    if rng.random() < 0.6:
        parts["Metadata"] = Stream("<x:xmpmeta/>", {"Type": "/Metadata", "Subtype": "/XML"})
    if rng.random() < 0.4:
        parts["Names"] = {"Dests": {"Names": ["intro", ["/Fit"]]}}
    if rng.random() < 0.35:
        parts["OpenAction"] = {"S": "/GoTo", "D": ["/Fit"]} if rng.random() < 0.5 else ["/FitH", 792]
    if rng.random() < 0.35:
        parts["AcroForm"] = {"Fields": [{"FT": "/Tx", "T": "name", "V": "", "Rect": [0, 0, 100, 20]}],
                             "DA": "/Helv 0 Tf 0 g", "DR": {"Font": {"Helv": _font(rng, 9)}},
                             "NeedAppearances": True}
    if rng.random() < 0.45:
        parts["StructTreeRoot"] = {"Type": "/StructTreeRoot", "K": {"S": "/Document", "K": [0]},
                                   "ParentTree": {"Nums": [0, []]}, "RoleMap": {"Heading": "/H1"}}
        parts["MarkInfo"] = {"Marked": True}
    if rng.random() < 0.5:
        parts["PageLayout"] = "/SinglePage" if rng.random() < 0.5 else "/OneColumn"
    if rng.random() < 0.4:
        parts["ViewerPreferences"] = {"DisplayDocTitle": True, "FitWindow": rng.random() < 0.5}
    if rng.random() < 0.5:
        parts["Lang"] = "en-US"
    if rng.random() < 0.3:
        parts["PageMode"] = "/UseOutlines"
    return parts


def benign_tree(rng) -> DocTree:
    spec = {"Type": "/Catalog", "Pages": _pages(rng, rich=True)}
    spec.update(_benign_parts(rng))
    return make_tree(dict(sorted(spec.items())))


def _payload(rng, shared: bool):
    code = "var s=unescape('%u" + "".join(f"{int(v):02x}" for v in rng.integers(0, 256, 12)) + "');eval(s);"
    if shared:
        # the script pulls a second stream in through a shared reference
        return Stream(code, {"Next": Shared("stage2", Stream("spray();", {}))})
    return Stream(code, {})


def malicious_tree(rng, trigger: tuple | None = None) -> DocTree:
    trigger = TRIGGER_POINTS[int(rng.integers(len(TRIGGER_POINTS)))] if trigger is None else tuple(trigger)
    pages = _pages(rng, rich=False)
    spec = {"Type": "/Catalog", "Pages": pages}
    if rng.random() < 0.25:
        spec["Outlines"] = {"Type": "/Outlines", "Count": 0}
    if rng.random() < 0.15:
        spec["Metadata"] = Stream("<x:xmpmeta/>", {"Type": "/Metadata", "Subtype": "/XML"})
    if rng.random() < 0.2:
        spec["PageLayout"] = "/SinglePage"
    if rng.random() < 0.15:
        spec["Lang"] = "en-US"
    js = _payload(rng, shared=rng.random() < 0.3)
    action = {"S": "/JavaScript", "JS": js}
    if trigger == ("Pages", "Kids", "AA"):
        pages.spec["Kids"][0]["AA"] = {"O": action}
    elif trigger == ("Names", "JavaScript", "Names"):
        spec["Names"] = {"JavaScript": {"Names": ["js0", action]}}
    elif trigger == ("OpenAction", "JS"):
        spec["OpenAction"] = action
    elif trigger == ("StructTreeRoot", "JS"):
        spec["StructTreeRoot"] = {"Type": "/StructTreeRoot", "JS": js}
    else:
        raise ValueError(f"unknown trigger point {trigger}")
    tree = make_tree(dict(sorted(spec.items())))
    digest = None
    for top in tree.nodes_at(trigger):
        for nid in tree.descendants(top):
            if tree.nodes[nid].kind == "stream" and tree.nodes[nid].value.startswith("var s"):
                digest = payload_digest(tree, nid)
    marker = ExploitMarker(digest)
    tree = with_marker(tree, marker)
    assert payload_nodes(tree, marker)
    return tree


def generate(n_benign: int, n_malicious: int, seed: int = 0) -> list[tuple[str, DocTree, int]]:
    """``(id, tree, label)`` triples, benign first; label 1 is malicious."""
    if n_benign < 1 or n_malicious < 1:
        raise ValueError("both counts must be at least 1")
    rng = np.random.default_rng(derive_seed(seed, "synth"))
    out = [(f"b{i:05d}", benign_tree(rng), 0) for i in range(n_benign)]
    out += [(f"m{i:05d}", malicious_tree(rng), 1) for i in range(n_malicious)]
    return out


def write_corpus(out_dir, n_benign: int, n_malicious: int, seed: int = 0) -> Path:
    out = Path(out_dir)
    (out / "trees").mkdir(parents=True, exist_ok=True)
    labels, markers = [], []
    for doc_id, tree, label in generate(n_benign, n_malicious, seed):
        (out / "trees" / f"{doc_id}.json").write_text(save_tree(tree))
        labels.append(f"{doc_id},{label}")
        if tree.marker is not None:
            markers.append(json.dumps({"id": doc_id, **tree.marker.to_json()}, sort_keys=True))
    (out / "labels.csv").write_text("id,label\n" + "\n".join(labels) + "\n")
    (out / "markers.jsonl").write_text("\n".join(markers) + ("\n" if markers else ""))
    return out


def read_corpus(root) -> list[tuple[str, DocTree, int]]:
    from .doctree import load_tree
    root = Path(root)
    rows = [line.split(",") for line in (root / "labels.csv").read_text().splitlines()[1:] if line]
    return [(i, load_tree((root / "trees" / f"{i}.json").read_text()), int(y)) for i, y in rows]
