"""In-memory model of PDF-like document trees.

A document is an object graph: every node (indirect object or nested direct
value) lives in a flat store keyed by id, and container nodes point at their
children by id.  Shared objects simply have several parents.  The *tree* view
used for structural paths is the breadth-first shortest-path spanning tree of
that graph, rooted at the catalog (``/Root``), with children visited in
lexicographic key order (arrays in index order).

Structural paths are tuples of dictionary keys below the root, e.g.
``("Pages", "Kids", "AA")`` for ``/Root/Pages/Kids/AA``.  Arrays are
transparent: an array and its elements all share the array's path.

All trees are immutable; every mutation returns a new :class:`DocTree`.
"""
from __future__ import annotations

import hashlib
import json
import math
import types
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Iterable, Mapping, Union

from .errors import KindMismatch, NoPayloadAtSource, PathNotFound, SchemaViolation

Path = tuple  # tuple[str, ...]

KINDS = frozenset(
    {"dictionary", "array", "name", "string", "number", "boolean", "stream", "null", "reference"}
)
KEYED_KINDS = frozenset({"dictionary", "stream"})
CONTAINER_KINDS = frozenset({"dictionary", "stream", "array"})

TRIGGER_POINTS = (
    ("Pages", "Kids", "AA"),
    ("Names", "JavaScript", "Names"),
    ("OpenAction", "JS"),
    ("StructTreeRoot", "JS"),
)


def path_str(path: Iterable[str]) -> str:
    return "/Root" + "".join("/" + key.replace("#", "#23").replace("/", "#2F") for key in path)


def parse_path(text: str) -> Path:
    """Inverse of :func:`path_str`; accepts paths with or without the ``/Root`` prefix."""
    parts = [p for p in text.split("/") if p]
    if parts and parts[0] == "Root":
        parts = parts[1:]
    return tuple(p.replace("#2F", "/").replace("#23", "#") for p in parts)


@dataclass(frozen=True)
class StreamMeta:
    length: int
    filter: str | None = None


@dataclass(frozen=True)
class DocNode:
    """One object in the store.

    ``entries`` holds ``(key, child_id)`` pairs for dictionaries and streams
    (kept sorted by key) or child ids for arrays.  Scalars carry ``value``;
    streams carry their decoded-as-latin-1 data in ``value``.  A ``reference``
    node is a reference whose target object does not exist in the store.
    """

    kind: str
    entries: tuple = ()
    value: Any = None
    stream_meta: StreamMeta | None = None
    target: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown node kind {self.kind!r}")
        if self.kind in KEYED_KINDS:
            keys = [k for k, _ in self.entries]
            if len(set(keys)) != len(keys):
                raise ValueError("duplicate dictionary key")
            object.__setattr__(self, "entries", tuple(sorted(self.entries)))
        else:
            object.__setattr__(self, "entries", tuple(self.entries))
        if self.kind == "reference" and self.target is None:
            raise ValueError("reference node needs a target id")

    def child_ids(self) -> list[str]:
        if self.kind in KEYED_KINDS:
            return [c for _, c in self.entries]
        return list(self.entries)

    def labelled(self) -> list[tuple[Union[str, int], str]]:
        if self.kind in KEYED_KINDS:
            return list(self.entries)
        return list(enumerate(self.entries))

    def get(self, key: str) -> str | None:
        for k, c in self.entries if self.kind in KEYED_KINDS else ():
            if k == key:
                return c
        return None

    def with_entry(self, key: str, child: str) -> "DocNode":
        kept = [(k, c) for k, c in self.entries if k != key]
        return DocNode(self.kind, tuple(kept) + ((key, child),), self.value, self.stream_meta)

    def without_label(self, label) -> "DocNode":
        if self.kind in KEYED_KINDS:
            kept = tuple((k, c) for k, c in self.entries if k != label)
        else:
            kept = self.entries[:label] + self.entries[label + 1:]
        return DocNode(self.kind, kept, self.value, self.stream_meta, self.target)

    def appended(self, child: str) -> "DocNode":
        return DocNode(self.kind, self.entries + (child,), self.value, self.stream_meta)


@dataclass(frozen=True)
class ExploitMarker:
    """What makes a document count as malicious for the static proxy oracle.

    A document is proxy-malicious when some node under one of ``marker_paths``
    has the payload fingerprint ``payload_digest`` (see :func:`payload_digest`).
    """

    payload_digest: str
    trigger_points: tuple = TRIGGER_POINTS
    marker_paths: frozenset = field(default=frozenset(TRIGGER_POINTS))

    def __post_init__(self):
        object.__setattr__(self, "trigger_points", tuple(tuple(p) for p in self.trigger_points))
        object.__setattr__(self, "marker_paths", frozenset(tuple(p) for p in self.marker_paths))
        missing = set(TRIGGER_POINTS) - set(self.trigger_points)
        if missing:
            raise ValueError(f"trigger points must include {sorted(missing)}")

    def to_json(self) -> dict:
        return {
            "payload_digest": self.payload_digest,
            "trigger_points": [path_str(p) for p in self.trigger_points],
            "marker_paths": sorted(path_str(p) for p in self.marker_paths),
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "ExploitMarker":
        return cls(
            payload_digest=obj["payload_digest"],
            trigger_points=tuple(parse_path(p) for p in obj["trigger_points"]),
            marker_paths=frozenset(parse_path(p) for p in obj["marker_paths"]),
        )


@dataclass(frozen=True, eq=True)
class DocTree:
    root: str
    nodes: Mapping[str, DocNode]
    marker: ExploitMarker | None = None

    def __post_init__(self):
        object.__setattr__(self, "nodes", types.MappingProxyType(dict(self.nodes)))
        if self.root not in self.nodes:
            raise ValueError(f"root {self.root!r} not in node store")

    def __hash__(self):
        return hash((self.root, len(self.nodes)))

    # -- spanning structure -------------------------------------------------

    @cached_property
    def _bfs(self):
        parent: dict[str, tuple[str, Any]] = {}
        order = [self.root]
        children: dict[str, list] = {self.root: []}
        seen = {self.root}
        queue = deque([self.root])
        while queue:
            nid = queue.popleft()
            node = self.nodes[nid]
            for label, cid in node.labelled():
                if cid in seen or cid not in self.nodes:
                    continue
                seen.add(cid)
                parent[cid] = (nid, label)
                children[nid].append((label, cid))
                children[cid] = []
                order.append(cid)
                queue.append(cid)
        return parent, order, children

    @property
    def tree_edges(self) -> dict[str, tuple[str, Any]]:
        """child id -> (parent id, key or array index) for every tree edge."""
        return self._bfs[0]

    @property
    def bfs_order(self) -> list[str]:
        return self._bfs[1]

    def tree_children(self, nid: str) -> list[tuple[Any, str]]:
        return self._bfs[2].get(nid, [])

    @cached_property
    def node_paths(self) -> dict[str, Path]:
        paths = {self.root: ()}
        for nid in self.bfs_order[1:]:
            parent, label = self.tree_edges[nid]
            base = paths[parent]
            paths[nid] = base + (label,) if isinstance(label, str) else base
        return paths

    @cached_property
    def depths(self) -> dict[str, int]:
        depth = {self.root: 0}
        for nid in self.bfs_order[1:]:
            depth[nid] = depth[self.tree_edges[nid][0]] + 1
        return depth

    @cached_property
    def paths(self) -> frozenset:
        """Every structural path present in the tree (the root's empty path excluded)."""
        return frozenset(p for p in self.node_paths.values() if p)

    @cached_property
    def _by_path(self) -> dict[Path, list[str]]:
        out: dict[Path, list[str]] = {}
        for nid in self.bfs_order:
            out.setdefault(self.node_paths[nid], []).append(nid)
        return out

    def nodes_at(self, path: Path) -> list[str]:
        return list(self._by_path.get(tuple(path), []))

    def keyed_edges_at(self, path: Path) -> list[tuple[str, str, str]]:
        """(parent, key, child) for each keyed tree edge whose child sits at ``path``."""
        path = tuple(path)
        if not path:
            return []
        out = []
        for nid in self.nodes_at(path):
            parent, label = self.tree_edges[nid]
            if isinstance(label, str):
                out.append((parent, label, nid))
        return out

    def descendants(self, nid: str) -> list[str]:
        """``nid`` and everything below it along tree edges, in BFS order."""
        out = [nid]
        i = 0
        while i < len(out):
            out.extend(c for _, c in self.tree_children(out[i]))
            i += 1
        return out

    def root_children(self) -> list[str]:
        return sorted({p[0] for p in self.paths})

    @cached_property
    def refcounts(self) -> dict[str, int]:
        counts = {nid: 0 for nid in self.nodes}
        for node in self.nodes.values():
            for cid in node.child_ids():
                if cid in counts:
                    counts[cid] += 1
        return counts


Fragment = DocTree


# -- structural comparison ---------------------------------------------------


def structural_form(tree: DocTree, nid: str | None = None):
    """Id-free nested tuple describing the tree below ``nid`` (default: root).

    Entries that are graph edges but not tree edges are recorded as back
    references to the target's structural path.
    """
    nid = tree.root if nid is None else nid
    node = tree.nodes[nid]
    parts = []
    for label, cid in node.labelled():
        if tree.tree_edges.get(cid) == (nid, label):
            parts.append((label, structural_form(tree, cid)))
        elif cid in tree.node_paths:
            parts.append((label, ("backref", tree.node_paths[cid])))
        else:
            parts.append((label, ("orphan", tree.nodes[cid].kind if cid in tree.nodes else None)))
    meta = (node.stream_meta.length, node.stream_meta.filter) if node.stream_meta else None
    return (node.kind, node.value, meta, node.target is not None, tuple(parts))


def root_subtree_forms(tree: DocTree) -> dict[str, Any]:
    """Root-child key -> structural form of the subtree hanging there."""
    return {label: structural_form(tree, cid) for label, cid in tree.tree_children(tree.root)
            if isinstance(label, str)}


# -- building / importing ----------------------------------------------------


def make_tree(spec, marker: ExploitMarker | None = None) -> DocTree:
    """Build a tree from nested Python values (handy for tests and synthesis).

    ``dict`` -> dictionary, ``list`` -> array, ``str`` starting with ``/`` ->
    name, other ``str`` -> string, ``bool``/``int``/``float``/``None`` -> the
    matching scalar, ``Stream(data, entries)`` -> stream.  ``Shared(tag, spec)``
    and ``Ref(tag)`` express objects with several parents (cycles included).
    Nodes are numbered depth-first, so equal specs give identical trees.
    """
    store: dict[str, DocNode] = {}
    root = _build(spec, store, [0])
    dangling = {c for n in store.values() for c in n.child_ids()} - set(store)
    if dangling:
        raise ValueError(f"Ref to undefined Shared tags: {sorted(dangling)}")
    return DocTree(root, store, marker)


@dataclass(frozen=True)
class Stream:
    data: str
    entries: Mapping = field(default_factory=dict)
    filter: str | None = None


@dataclass(frozen=True)
class Shared:
    """A value that becomes one shared node, reachable elsewhere through ``Ref(tag)``."""

    tag: str
    spec: Any = None


@dataclass(frozen=True)
class Ref:
    tag: str


def _build(spec, store, counter) -> str:
    if isinstance(spec, Ref):
        return f"s{spec.tag}"
    if isinstance(spec, Shared):
        inner = _build(spec.spec, store, counter)
        store[f"s{spec.tag}"] = store.pop(inner)
        return f"s{spec.tag}"
    nid = f"n{counter[0]}"
    counter[0] += 1
    store[nid] = DocNode("null")  # placeholder keeps numbering depth-first
    if isinstance(spec, dict):
        node = DocNode("dictionary", tuple((k, _build(v, store, counter)) for k, v in spec.items()))
    elif isinstance(spec, list):
        node = DocNode("array", tuple(_build(v, store, counter) for v in spec))
    elif isinstance(spec, Stream):
        entries = tuple((k, _build(v, store, counter)) for k, v in spec.entries.items())
        node = DocNode("stream", entries, spec.data, StreamMeta(len(spec.data), spec.filter))
    elif isinstance(spec, bool):
        node = DocNode("boolean", value=spec)
    elif spec is None:
        node = DocNode("null")
    elif isinstance(spec, (int, float)):
        node = DocNode("number", value=spec)
    elif isinstance(spec, str) and spec.startswith("/"):
        node = DocNode("name", value=spec[1:])
    elif isinstance(spec, str):
        node = DocNode("string", value=spec)
    else:
        raise TypeError(f"cannot build a node from {type(spec).__name__}")
    store[nid] = node
    return nid


def fragment(tree: DocTree, nid: str, follow: str = "tree") -> DocTree:
    """Copy the part of ``tree`` hanging below ``nid`` into a standalone fragment.

    ``follow="tree"`` keeps only tree edges (non-tree entries are dropped so the
    fragment does not drag in the rest of the document); ``follow="graph"``
    keeps the full reference closure.
    """
    store: dict[str, DocNode] = {}
    if follow == "tree":
        keep = set(tree.descendants(nid))
        for cid in keep:
            node = tree.nodes[cid]
            tree_kids = {c for _, c in tree.tree_children(cid)}
            if node.kind in KEYED_KINDS:
                entries = tuple((k, c) for k, c in node.entries if c in tree_kids)
            elif node.kind == "array":
                entries = tuple(c for c in node.entries if c in tree_kids)
            else:
                entries = node.entries
            store[cid] = DocNode(node.kind, entries, node.value, node.stream_meta, node.target)
    elif follow == "graph":
        for cid in reference_closure(tree, nid):
            store[cid] = tree.nodes[cid]
    else:
        raise ValueError(follow)
    return DocTree(nid, store)


def reference_closure(tree: DocTree, nid: str) -> list[str]:
    seen = [nid]
    seen_set = {nid}
    i = 0
    while i < len(seen):
        for cid in tree.nodes[seen[i]].child_ids():
            if cid not in seen_set and cid in tree.nodes:
                seen_set.add(cid)
                seen.append(cid)
        i += 1
    return seen


class _Store:
    """Mutable scratch copy of a node store with reference-count bookkeeping."""

    def __init__(self, tree: DocTree):
        self.root = tree.root
        self.nodes = dict(tree.nodes)
        self.refs = dict(tree.refcounts)
        self.marker = tree.marker
        self._next = 1 + max((int(n[1:]) for n in self.nodes if n[:1] == "x" and n[1:].isdigit()),
                             default=-1)

    def fresh(self) -> str:
        nid = f"x{self._next}"
        self._next += 1
        return nid

    def import_fragment(self, frag: DocTree) -> str:
        mapping = {}
        for old in reference_closure(frag, frag.root):
            mapping[old] = self.fresh()
        for old, new in mapping.items():
            node = frag.nodes[old]
            if node.kind in KEYED_KINDS:
                entries = tuple((k, mapping[c]) for k, c in node.entries if c in mapping)
            elif node.kind == "array":
                entries = tuple(mapping[c] for c in node.entries if c in mapping)
            else:
                entries = ()
            self.nodes[new] = DocNode(node.kind, entries, node.value, node.stream_meta, node.target)
            self.refs[new] = 0
        for new in mapping.values():
            for cid in self.nodes[new].child_ids():
                self.refs[cid] += 1
        return mapping[frag.root]

    def link(self, parent: str, key, child: str):
        """Point ``parent[key]`` at ``child`` (append when ``key`` is None)."""
        node = self.nodes[parent]
        if key is None:
            if node.kind != "array":
                raise KindMismatch("only arrays take unkeyed children")
            self.nodes[parent] = node.appended(child)
        else:
            if node.kind not in KEYED_KINDS:
                raise KindMismatch(f"cannot put key {key!r} into a {node.kind}")
            old = node.get(key)
            self.nodes[parent] = node.with_entry(key, child)
            if old is not None:
                self._decref(old)
        self.refs[child] = self.refs.get(child, 0) + 1

    def unlink(self, parent: str, label):
        node = self.nodes[parent]
        if node.kind in KEYED_KINDS:
            child = node.get(label)
        else:
            child = node.entries[label]
        self.nodes[parent] = node.without_label(label)
        self._decref(child)

    def _decref(self, nid: str):
        stack = [nid]
        while stack:
            cur = stack.pop()
            if cur not in self.refs:
                continue
            self.refs[cur] -= 1
            if self.refs[cur] <= 0 and cur != self.root:
                node = self.nodes.pop(cur)
                del self.refs[cur]
                stack.extend(node.child_ids())

    def tree(self) -> DocTree:
        return DocTree(self.root, self.nodes, self.marker)


def _as_fragment(subtree: Union[DocTree, DocNode]) -> DocTree:
    if isinstance(subtree, DocTree):
        return subtree
    if subtree.child_ids():
        raise ValueError("a bare DocNode subtree must be a leaf; pass a fragment instead")
    return DocTree("leaf", {"leaf": subtree})


def _container_at(tree: DocTree, path: Path, keyed: bool) -> str:
    candidates = tree.nodes_at(path)
    if not candidates:
        raise PathNotFound(path_str(path))
    wanted = KEYED_KINDS if keyed else {"array"}
    for nid in candidates:
        if tree.nodes[nid].kind in wanted:
            return nid
    kinds = sorted({tree.nodes[n].kind for n in candidates})
    raise KindMismatch(f"{path_str(path)} holds {kinds}, not a {'dictionary' if keyed else 'array'}")


# -- mutations ---------------------------------------------------------------


def delete_subtree(tree: DocTree, path: Path) -> DocTree:
    """Remove every keyed tree edge at ``path``; unreferenced objects go with it."""
    edges = tree.keyed_edges_at(path)
    if not edges:
        raise PathNotFound(path_str(path))
    store = _Store(tree)
    for parent, key, _ in edges:
        store.unlink(parent, key)
    return store.tree()


def delete_edge(tree: DocTree, parent: str, label) -> DocTree:
    store = _Store(tree)
    store.unlink(parent, label)
    return store.tree()


def insert_subtree(tree: DocTree, parent_path: Path, key: str | None,
                   subtree: Union[DocTree, DocNode]) -> DocTree:
    """Graft ``subtree`` under the first container at ``parent_path``.

    With a ``key`` the container must be a dictionary (an existing child under
    the same key is replaced); with ``key=None`` it must be an array and the
    subtree is appended.
    """
    parent = _container_at(tree, tuple(parent_path), keyed=key is not None)
    store = _Store(tree)
    child = store.import_fragment(_as_fragment(subtree))
    store.link(parent, key, child)
    return store.tree()


def replace_subtree(tree: DocTree, path: Path, subtree: Union[DocTree, DocNode]) -> DocTree:
    """Swap whatever sits at ``path`` for ``subtree``.

    All keyed edges at ``path`` are removed and the new subtree lands in the
    first dictionary at the parent path, i.e. the same result as a delete
    followed by an insert.
    """
    path = tuple(path)
    edges = tree.keyed_edges_at(path)
    if not edges:
        raise PathNotFound(path_str(path))
    target = _container_at(tree, path[:-1], keyed=True)
    store = _Store(tree)
    child = store.import_fragment(_as_fragment(subtree))
    store.link(target, path[-1], child)
    for parent, key, _ in edges:
        if parent != target:
            store.unlink(parent, key)
    return store.tree()


def replace_node(tree: DocTree, nid: str, subtree: Union[DocTree, DocNode]) -> DocTree:
    """Replace the single tree edge leading to ``nid`` (keyed or array slot)."""
    parent, label = tree.tree_edges[nid]
    store = _Store(tree)
    child = store.import_fragment(_as_fragment(subtree))
    if isinstance(label, str):
        store.link(parent, label, child)
    else:
        node = store.nodes[parent]
        entries = list(node.entries)
        old = entries[label]
        entries[label] = child
        store.nodes[parent] = DocNode(node.kind, tuple(entries), node.value, node.stream_meta)
        store.refs[child] += 1
        store._decref(old)
    return store.tree()


def insert_at_node(tree: DocTree, nid: str, key: str | None, subtree) -> DocTree:
    store = _Store(tree)
    child = store.import_fragment(_as_fragment(subtree))
    store.link(nid, key, child)
    return store.tree()


def ensure_container(store: _Store, tree: DocTree, path: Path) -> str:
    """Id of a dictionary at ``path``, creating missing dictionaries on the way."""
    path = tuple(path)
    for nid in tree.nodes_at(path):
        if store.nodes.get(nid) is not None and store.nodes[nid].kind in KEYED_KINDS:
            return nid
    if not path:
        raise KindMismatch("root is not a dictionary")
    holders = [n for n in tree.nodes_at(path) if store.nodes[n].kind == "array"]
    fresh = store.fresh()
    store.nodes[fresh] = DocNode("dictionary")
    store.refs[fresh] = 0
    if holders:
        store.link(holders[0], None, fresh)
    else:
        parent = ensure_container(store, tree, path[:-1])
        store.link(parent, path[-1], fresh)
    return fresh


def graft_at_path(tree: DocTree, path: Path, subtree) -> DocTree:
    """Put ``subtree`` at ``path``, creating intermediate dictionaries as needed."""
    path = tuple(path)
    if not path:
        raise KindMismatch("cannot graft at the root path")
    store = _Store(tree)
    parent = ensure_container(store, tree, path[:-1])
    child = store.import_fragment(_as_fragment(subtree))
    store.link(parent, path[-1], child)
    return store.tree()


def with_marker(tree: DocTree, marker: ExploitMarker | None) -> DocTree:
    return DocTree(tree.root, tree.nodes, marker)


# -- proxy maliciousness -----------------------------------------------------


def payload_digest(tree: DocTree, nid: str) -> str | None:
    """Fingerprint of the payload rooted at ``nid``.

    The fingerprint covers the contents of every stream in the node's
    reference closure; it is ``None`` when the closure has a dangling reference
    (an incomplete payload).  Keys such as ``/Length`` or ``/Filter`` do not
    enter the fingerprint, so editing them keeps the payload intact.
    """
    closure = reference_closure(tree, nid)
    streams = []
    for cid in closure:
        node = tree.nodes[cid]
        if node.kind == "reference":
            return None
        if node.kind == "stream":
            streams.append(str(node.value))
    if not streams:
        return None
    h = hashlib.sha256()
    for s in sorted(streams):
        h.update(s.encode("latin-1", "replace"))
        h.update(b"\x00")
    return h.hexdigest()


def payload_nodes(tree: DocTree, marker: ExploitMarker, paths: Iterable[Path] | None = None) -> list[str]:
    """Nodes under the given trigger paths whose payload fingerprint matches."""
    found = []
    for trig in (marker.marker_paths if paths is None else paths):
        for top in tree.nodes_at(trig):
            for nid in tree.descendants(top):
                if tree.nodes[nid].kind == "stream" and payload_digest(tree, nid) == marker.payload_digest:
                    if nid not in found:
                        found.append(nid)
    return found


def is_malicious_proxy(tree: DocTree, marker: ExploitMarker | None = None) -> bool:
    marker = tree.marker if marker is None else marker
    if marker is None:
        return False
    return bool(payload_nodes(tree, marker))


def move_exploit(tree: DocTree, src: Path, dst: Path, marker: ExploitMarker | None = None) -> DocTree:
    """Re-attach the payload hosted under trigger ``src`` at trigger ``dst``."""
    marker = tree.marker if marker is None else marker
    src, dst = tuple(src), tuple(dst)
    if marker is None:
        raise NoPayloadAtSource("tree carries no exploit marker")
    hits = payload_nodes(tree, marker, [src])
    if not hits:
        raise NoPayloadAtSource(path_str(src))
    if src == dst:
        return tree
    payload = hits[0]
    store = _Store(tree)
    parent = ensure_container(store, tree, dst[:-1])
    store.link(parent, dst[-1], payload)
    # the link above holds a reference, so detaching cannot collect the payload
    old_parent, label = tree.tree_edges[payload]
    if old_parent in store.nodes and store.nodes[old_parent].kind in CONTAINER_KINDS:
        node = store.nodes[old_parent]
        if node.kind in KEYED_KINDS and node.get(label) == payload:
            store.unlink(old_parent, label)
        elif node.kind == "array" and label < len(node.entries) and node.entries[label] == payload:
            store.unlink(old_parent, label)
    return store.tree()


# -- JSON exchange -----------------------------------------------------------


def _node_json(node: DocNode) -> dict:
    out: dict[str, Any] = {"kind": node.kind}
    if node.kind in KEYED_KINDS:
        out["entries"] = {k: c for k, c in node.entries}
    elif node.kind == "array":
        out["entries"] = list(node.entries)
    else:
        out["entries"] = None
    out["stream_meta"] = (
        {"length": node.stream_meta.length, "filter": node.stream_meta.filter}
        if node.stream_meta else None
    )
    out["value"] = node.value
    if node.target is not None:
        out["target"] = node.target
    return out


def tree_to_json(tree: DocTree) -> dict:
    return {
        "root": tree.root,
        "nodes": {nid: _node_json(node) for nid, node in tree.nodes.items()},
        "markers": tree.marker.to_json() if tree.marker else {},
    }


def save_tree(tree: DocTree) -> str:
    return json.dumps(tree_to_json(tree), sort_keys=True, separators=(",", ":"))


def load_tree(text: str) -> DocTree:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaViolation(f"not JSON: {exc}") from exc
    return tree_from_json(obj)


def tree_from_json(obj) -> DocTree:
    if not isinstance(obj, dict) or set(obj) - {"root", "nodes", "markers"} or "root" not in obj \
            or "nodes" not in obj:
        raise SchemaViolation("expected an object with 'root', 'nodes' and optional 'markers'")
    if not isinstance(obj["nodes"], dict) or obj["root"] not in obj["nodes"]:
        raise SchemaViolation("'root' must name an entry of 'nodes'")
    nodes = {}
    for nid, raw in obj["nodes"].items():
        nodes[nid] = _node_from_json(nid, raw)
    for nid, node in nodes.items():
        for cid in node.child_ids():
            if cid not in nodes:
                raise SchemaViolation(f"node {nid} points at unknown node {cid}")
    marker = ExploitMarker.from_json(obj["markers"]) if obj.get("markers") else None
    return DocTree(obj["root"], nodes, marker)


def _node_from_json(nid, raw) -> DocNode:
    if not isinstance(raw, dict) or raw.get("kind") not in KINDS:
        raise SchemaViolation(f"node {nid}: missing or unknown kind")
    kind = raw["kind"]
    entries = raw.get("entries")
    if kind in KEYED_KINDS:
        if not isinstance(entries, dict):
            raise SchemaViolation(f"node {nid}: {kind} entries must be an object")
        entries = tuple(entries.items())
    elif kind == "array":
        if not isinstance(entries, list):
            raise SchemaViolation(f"node {nid}: array entries must be a list")
        entries = tuple(entries)
    elif entries not in (None, [], {}):
        raise SchemaViolation(f"node {nid}: scalar nodes take no entries")
    else:
        entries = ()
    meta = raw.get("stream_meta")
    if meta is not None:
        if not isinstance(meta, dict) or not isinstance(meta.get("length"), int):
            raise SchemaViolation(f"node {nid}: bad stream_meta")
        meta = StreamMeta(meta["length"], meta.get("filter"))
    value = raw.get("value")
    if kind == "number" and (isinstance(value, bool) or not isinstance(value, (int, float))
                             or not math.isfinite(value)):
        raise SchemaViolation(f"node {nid}: number needs a finite numeric value")
    if kind == "reference" and not isinstance(raw.get("target"), str):
        raise SchemaViolation(f"node {nid}: reference needs a target")
    try:
        return DocNode(kind, entries, value, meta, raw.get("target"))
    except ValueError as exc:
        raise SchemaViolation(f"node {nid}: {exc}") from exc
