"""Independent reference implementations used as test oracles.

Nothing here imports the package's algorithms; each routine is a plain,
slow re-derivation of the quantity under test.
"""
from __future__ import annotations

import itertools
from collections import deque

import numpy as np

FIG1A = b"""%PDF-1.4
1 0 obj
<< /Type /Catalog /OpenAction << /S /JavaScript /JS 2 0 R >> /Pages 3 0 R >>
endobj
2 0 obj
<< /Length 27 /Filter /FlateDecode >>
stream
app.alert('exploit here');
endstream
endobj
3 0 obj
<< /Type /Pages /Kids [4 0 R] /Count 1 >>
endobj
4 0 obj
<< /Type /Page /Parent 3 0 R >>
endobj
trailer
<< /Size 5 /Root 1 0 R >>
%%EOF
"""

# structural paths of the Fig. 1a objects, worked out by hand:
# object 4 reaches object 3 again only through /Parent, a back edge
FIG1_PATHS = {
    ("Type",), ("OpenAction",), ("OpenAction", "S"), ("OpenAction", "JS"),
    ("OpenAction", "JS", "Length"), ("OpenAction", "JS", "Filter"),
    ("Pages",), ("Pages", "Type"), ("Pages", "Kids"), ("Pages", "Count"),
    ("Pages", "Kids", "Type"),
}


def graph_paths(tree) -> set:
    """Structural paths by a fresh BFS over the raw reference graph.

    Keys are visited in sorted order and array items in index order, the
    documented tie-break; arrays add nothing to a path.
    """
    nodes = tree.nodes
    seen = {tree.root}
    queue = deque([(tree.root, ())])
    out = set()
    while queue:
        nid, path = queue.popleft()
        node = nodes[nid]
        if node.kind in ("dictionary", "stream"):
            labelled = [(k, c, path + (k,)) for k, c in sorted(node.entries, key=lambda kv: kv[0])]
        elif node.kind == "array":
            labelled = [(i, c, path) for i, c in enumerate(node.entries)]
        else:
            labelled = []
        for _, cid, cpath in labelled:
            if cid in seen or cid not in nodes:
                continue
            seen.add(cid)
            if cpath:
                out.add(cpath)
            queue.append((cid, cpath))
    return out


def bfs_depths(tree) -> dict:
    """Shortest hop count from the root for every reachable node."""
    dist = {tree.root: 0}
    queue = deque([tree.root])
    while queue:
        nid = queue.popleft()
        for cid in tree.nodes[nid].child_ids():
            if cid in tree.nodes and cid not in dist:
                dist[cid] = dist[nid] + 1
                queue.append(cid)
    return dist


def forward_loops(weights, biases, x) -> np.ndarray:
    """Network evaluation with explicit Python loops."""
    h = [float(v) for v in x]
    for k, (w, b) in enumerate(zip(weights, biases)):
        nxt = []
        for i in range(w.shape[0]):
            s = float(b[i])
            for j in range(w.shape[1]):
                s += float(w[i, j]) * h[j]
            nxt.append(max(s, 0.0) if k < len(weights) - 1 else s)
        h = nxt
    return np.array(h)


def box_points(lower, upper):
    """Every binary point inside the box ``lower <= p <= upper``."""
    lower = np.asarray(lower)
    free = np.flatnonzero(lower != np.asarray(upper))
    for bits in itertools.product((0, 1), repeat=len(free)):
        p = lower.copy()
        p[free] = bits
        yield p


def region_boxes(x, ranges: dict, kind: str, k: int):
    """Boxes of a property from first principles: ``ranges`` maps subtree -> (start, end)."""
    names = sorted(ranges)
    x = np.asarray(x, dtype=np.uint8)
    if k == 0:
        return [(x.copy(), x.copy())]
    out = []
    if kind == "del":
        present = [s for s in names if x[ranges[s][0]:ranges[s][1]].any()]
        for choice in itertools.combinations(present, k):
            lo = x.copy()
            for s in choice:
                lo[ranges[s][0]:ranges[s][1]] = 0
            out.append((lo, x.copy()))
    else:
        for choice in itertools.combinations(names, min(k, len(names))):
            up = x.copy()
            for s in choice:
                up[ranges[s][0]:ranges[s][1]] = 1
            out.append((x.copy(), up))
    return out


def min_deletion_bruteforce(score_fn, x):
    """Smallest set of set bits whose clearing gives score <= 0, by subset enumeration."""
    bits = list(np.flatnonzero(x))
    for k in range(len(bits) + 1):
        for subset in itertools.combinations(bits, k):
            z = np.array(x).copy()
            z[list(subset)] = 0
            if score_fn(z) <= 0:
                return k
    return None


def adam_unrolled(p0, g, t, lr=0.01, b1=0.9, b2=0.999, eps=1e-8):
    """Adam on a constant gradient ``g`` for ``t`` steps, written out step by step."""
    p, m, v = float(p0), 0.0, 0.0
    for step in range(1, t + 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p -= lr * (m / (1 - b1 ** step)) / ((v / (1 - b2 ** step)) ** 0.5 + eps)
    return p
