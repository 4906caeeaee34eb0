"""Reverse mimicry: plant a malicious payload inside a benign document."""
from __future__ import annotations

from dataclasses import dataclass

from ..doctree import (DocTree, ExploitMarker, KindMismatch, fragment, graft_at_path, payload_nodes,
                       with_marker)
from ..errors import NoPayloadAtSource, TriggerPathUnavailable


@dataclass(frozen=True)
class Payload:
    fragment: DocTree  # payload object plus whatever it references
    path: tuple  # where it sat in the malicious seed
    trigger: tuple  # the trigger point it hangs under
    marker: ExploitMarker


def extract_payload(tree: DocTree, marker: ExploitMarker | None = None, closure: bool = True) -> Payload:
    """Cut the payload out of a malicious tree.

    With ``closure=False`` only tree edges are copied, which loses objects the
    payload reaches through shared references.
    """
    marker = tree.marker if marker is None else marker
    if marker is None:
        raise NoPayloadAtSource("tree carries no exploit marker")
    for trig in marker.trigger_points:
        hits = payload_nodes(tree, marker, [trig])
        if hits:
            nid = hits[0]
            frag = fragment(tree, nid, follow="graph" if closure else "tree")
            return Payload(frag, tree.node_paths[nid], trig, marker)
    raise NoPayloadAtSource("no payload under any trigger point")


def reverse_mimicry(benign: DocTree, payload: Payload) -> DocTree:
    """Graft ``payload`` into ``benign`` at its original path."""
    path = payload.path
    if not path or path[:len(payload.trigger)] != payload.trigger:
        raise TriggerPathUnavailable(f"payload path {path} is not below its trigger point")
    try:
        out = graft_at_path(benign, path, payload.fragment)
    except KindMismatch as exc:
        raise TriggerPathUnavailable(str(exc)) from exc
    return with_marker(out, payload.marker)
