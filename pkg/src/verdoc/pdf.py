"""Lenient reader and writer for the PDF subset the pipeline needs.

Only the object graph matters here: header, ``N G obj ... endobj`` bodies,
dictionaries, arrays, names, numbers, strings, streams, indirect references
and a trailer with ``/Root``.  The cross-reference table is ignored on input;
objects are located by scanning for ``obj`` markers, so missing or wrong xref
tables are harmless.  Encryption and object streams are not supported.
"""
from __future__ import annotations

import math
import re
from decimal import Decimal

from .doctree import KEYED_KINDS, DocNode, DocTree, StreamMeta
from .errors import MalformedDocument, Unserializable

_WS = b" \t\r\n\f\x00"
_DELIM = b"()<>[]{}/%"
_OBJ_RE = re.compile(rb"(\d+)\s+(\d+)\s+obj\b")
_NUM_RE = re.compile(rb"[+-]?(\d+\.?\d*|\.\d+)")
_INT_RE = re.compile(rb"\d+")


class _Ref:
    __slots__ = ("num", "gen")

    def __init__(self, num, gen):
        self.num, self.gen = num, gen

    @property
    def id(self):
        return f"{self.num} {self.gen}"


class _Reader:
    def __init__(self, data: bytes):
        self.data = data

    def skip_ws(self, pos: int) -> int:
        data = self.data
        n = len(data)
        while pos < n:
            c = data[pos]
            if c in _WS:
                pos += 1
            elif c == 0x25:  # '%' comment
                while pos < n and data[pos] not in b"\r\n":
                    pos += 1
            else:
                break
        return pos

    def regular_token(self, pos: int) -> tuple[bytes, int]:
        data = self.data
        end = pos
        while end < len(data) and data[end] not in _WS and data[end] not in _DELIM:
            end += 1
        return data[pos:end], end

    def value(self, pos: int):
        """Parse one value at ``pos``; returns (python value, new position)."""
        data = self.data
        pos = self.skip_ws(pos)
        if pos >= len(data):
            raise MalformedDocument("unexpected end of data")
        c = data[pos:pos + 1]
        if c == b"<" and data[pos + 1:pos + 2] == b"<":
            return self.dictionary(pos + 2)
        if c == b"<":
            end = data.find(b">", pos)
            if end < 0:
                raise MalformedDocument("unterminated hex string")
            digits = re.sub(rb"\s", b"", data[pos + 1:end])
            if len(digits) % 2:
                digits += b"0"
            try:
                raw = bytes.fromhex(digits.decode("ascii"))
            except ValueError as exc:
                raise MalformedDocument("bad hex string") from exc
            return ("string", raw.decode("latin-1")), end + 1
        if c == b"[":
            items = []
            pos += 1
            while True:
                pos = self.skip_ws(pos)
                if pos >= len(data):
                    raise MalformedDocument("unterminated array")
                if data[pos:pos + 1] == b"]":
                    return ("array", items), pos + 1
                item, pos = self.value(pos)
                items.append(item)
        if c == b"/":
            tok, end = self.regular_token(pos + 1)
            return ("name", _decode_name(tok)), end
        if c == b"(":
            return self.literal_string(pos + 1)
        m = _NUM_RE.match(data, pos)
        if m:
            text = m.group(0)
            ref = self._maybe_ref(m)
            if ref is not None:
                return ref
            if b"." in text:
                return ("number", float(text)), m.end()
            return ("number", int(text)), m.end()
        tok, end = self.regular_token(pos)
        if tok == b"true":
            return ("boolean", True), end
        if tok == b"false":
            return ("boolean", False), end
        if tok == b"null":
            return ("null", None), end
        raise MalformedDocument(f"unexpected token {tok[:20]!r} at byte {pos}")

    def _maybe_ref(self, m):
        if not _INT_RE.fullmatch(m.group(0)):
            return None
        p = self.skip_ws(m.end())
        m2 = _INT_RE.match(self.data, p)
        if not m2:
            return None
        p = self.skip_ws(m2.end())
        if self.data[p:p + 1] == b"R" and (p + 1 >= len(self.data) or self.data[p + 1] in _WS + _DELIM):
            return ("ref", _Ref(int(m.group(0)), int(m2.group(0)))), p + 1
        return None

    def dictionary(self, pos: int):
        items = []
        data = self.data
        while True:
            pos = self.skip_ws(pos)
            if pos >= len(data):
                raise MalformedDocument("unterminated dictionary")
            if data[pos:pos + 2] == b">>":
                return ("dictionary", items), pos + 2
            if data[pos:pos + 1] != b"/":
                raise MalformedDocument(f"dictionary key expected at byte {pos}")
            tok, pos = self.regular_token(pos + 1)
            item, pos = self.value(pos)
            items.append((_decode_name(tok), item))

    def literal_string(self, pos: int):
        data = self.data
        out = bytearray()
        depth = 1
        while pos < len(data):
            c = data[pos]
            if c == 0x5C:  # backslash
                pos += 1
                e = data[pos:pos + 1]
                if e in b"nrtbf":
                    out += {b"n": b"\n", b"r": b"\r", b"t": b"\t", b"b": b"\b", b"f": b"\f"}[e]
                    pos += 1
                elif e.isdigit():
                    m = re.match(rb"[0-7]{1,3}", data[pos:pos + 3])
                    out.append(int(m.group(0), 8) & 0xFF)
                    pos += len(m.group(0))
                elif e in b"\r\n":
                    pos += 1
                    if e == b"\r" and data[pos:pos + 1] == b"\n":
                        pos += 1
                else:
                    out += e
                    pos += 1
                continue
            if c == 0x28:
                depth += 1
            elif c == 0x29:
                depth -= 1
                if depth == 0:
                    return ("string", bytes(out).decode("latin-1")), pos + 1
            out.append(c)
            pos += 1
        raise MalformedDocument("unterminated string")

    def indirect(self, pos: int):
        """Parse an object body (after ``obj``); returns (value, stream data or None, end)."""
        value, pos = self.value(pos)
        p = self.skip_ws(pos)
        if value[0] == "dictionary" and self.data.startswith(b"stream", p):
            p += len(b"stream")
            if self.data[p:p + 2] == b"\r\n":
                p += 2
            elif self.data[p:p + 1] in (b"\n", b"\r"):
                p += 1
            stream, end = self._stream_body(value, p)
            return value, stream, end
        return value, None, pos

    def _stream_body(self, value, start: int):
        data = self.data
        length = dict(value[1]).get("Length")
        if length is not None and length[0] == "number" and isinstance(length[1], int):
            stop = start + length[1]
            tail = self.skip_ws(stop)
            if 0 <= length[1] and data.startswith(b"endstream", tail):
                return data[start:stop], tail + len(b"endstream")
        stop = data.find(b"endstream", start)
        if stop < 0:
            raise MalformedDocument("stream without endstream")
        body = data[start:stop]
        if body.endswith(b"\r\n"):
            body = body[:-2]
        elif body.endswith((b"\n", b"\r")):
            body = body[:-1]
        return body, stop + len(b"endstream")


def _decode_name(tok: bytes) -> str:
    out = bytearray()
    i = 0
    while i < len(tok):
        if tok[i] == 0x23 and i + 2 < len(tok) + 0 and re.fullmatch(rb"[0-9A-Fa-f]{2}", tok[i + 1:i + 3]):
            out.append(int(tok[i + 1:i + 3], 16))
            i += 3
        else:
            out.append(tok[i])
            i += 1
    return out.decode("latin-1")


def parse_pdf(data: bytes) -> DocTree:
    """Parse raw PDF bytes into a :class:`DocTree` rooted at the trailer's ``/Root``."""
    reader = _Reader(data)
    objects: dict[str, tuple] = {}
    cursor = 0
    for m in _OBJ_RE.finditer(data):
        if m.start() < cursor:
            continue  # inside the previous object's body (e.g. stream data)
        try:
            value, stream, end = reader.indirect(m.end())
        except MalformedDocument:
            continue
        objects[f"{int(m.group(1))} {int(m.group(2))}"] = (value, stream)
        cursor = end

    root_id = None
    for m in reversed(list(re.finditer(rb"trailer", data))):
        try:
            trailer, _ = reader.value(m.end())
        except MalformedDocument:
            continue
        if trailer[0] == "dictionary":
            root = dict(trailer[1]).get("Root")
            if root is not None and root[0] == "ref":
                root_id = root[1].id
                break
    if root_id is None or root_id not in objects:
        raise MalformedDocument("no resolvable trailer /Root")

    store: dict[str, DocNode] = {}
    for oid, (value, stream) in objects.items():
        counter = [0]
        store[oid] = _to_node(value, stream, oid, counter, store, objects)
    return DocTree(root_id, store)


def _to_node(value, stream, oid, counter, store, objects) -> DocNode:
    kind, payload = value

    def child(v):
        if v[0] == "ref":
            if v[1].id in objects:
                return v[1].id
            nid = f"{oid}.{counter[0]}"
            counter[0] += 1
            store[nid] = DocNode("reference", target=v[1].id)
            return nid
        nid = f"{oid}.{counter[0]}"
        counter[0] += 1
        store[nid] = _to_node(v, None, oid, counter, store, objects)
        return nid

    if kind == "dictionary":
        entries = {}
        for k, v in payload:
            entries[k] = child(v)  # last duplicate key wins
        entries = tuple(entries.items())
        if stream is not None:
            filt = dict(payload).get("Filter")
            fname = filt[1] if filt and filt[0] == "name" else None
            return DocNode("stream", entries, stream.decode("latin-1"), StreamMeta(len(stream), fname))
        return DocNode("dictionary", entries)
    if kind == "array":
        return DocNode("array", tuple(child(v) for v in payload))
    if kind == "ref":
        return DocNode("reference", target=payload.id)
    return DocNode(kind, value=payload)


# -- writing -----------------------------------------------------------------

_NAME_OK = set(range(0x21, 0x7F)) - set(_DELIM) - {0x23}


def _encode_name(name: str) -> bytes:
    raw = name.encode("latin-1", "replace")
    return b"/" + b"".join(bytes([c]) if c in _NAME_OK else b"#%02X" % c for c in raw)


def _encode_string(text: str) -> bytes:
    out = bytearray(b"(")
    for c in text.encode("latin-1", "replace"):
        if c in b"()\\":
            out += b"\\" + bytes([c])
        elif 0x20 <= c < 0x7F:
            out.append(c)
        else:
            out += b"\\%03o" % c
    return bytes(out + b")")


def _encode_number(v) -> bytes:
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise Unserializable(f"not a finite PDF number: {v!r}")
    if isinstance(v, int):
        return str(v).encode()
    text = format(Decimal(repr(v)), "f")
    if "." not in text:
        text += ".0"
    return text.encode()


def serialize_pdf(tree: DocTree) -> bytes:
    """Write ``tree`` as a PDF 1.4 file with a valid xref table.

    Containers, streams, the root and any node with other than exactly one
    parent become indirect objects; everything else is written inline.
    """
    refs = tree.refcounts
    order = list(tree.bfs_order) + sorted(set(tree.nodes) - set(tree.bfs_order))
    indirect: dict[str, int] = {}
    for nid in order:
        node = tree.nodes[nid]
        if node.kind == "reference":
            continue
        if nid == tree.root or node.kind in ("dictionary", "array", "stream") or refs.get(nid, 0) != 1:
            indirect[nid] = len(indirect) + 1
    dangling: dict[str, int] = {}

    def ref_to(nid: str) -> bytes:
        node = tree.nodes[nid]
        if node.kind == "reference":
            if nid not in dangling:
                dangling[nid] = len(indirect) + len(dangling) + 1
            return b"%d 0 R" % dangling[nid]
        if nid in indirect:
            return b"%d 0 R" % indirect[nid]
        return body(nid)

    def body(nid: str) -> bytes:
        node = tree.nodes[nid]
        if node.kind in KEYED_KINDS:
            inner = b" ".join(_encode_name(k) + b" " + ref_to(c) for k, c in node.entries)
            return b"<< " + inner + b" >>"
        if node.kind == "array":
            return b"[" + b" ".join(ref_to(c) for c in node.entries) + b"]"
        if node.kind == "name":
            return _encode_name(str(node.value))
        if node.kind == "string":
            return _encode_string(str(node.value))
        if node.kind == "number":
            return _encode_number(node.value)
        if node.kind == "boolean":
            return b"true" if node.value else b"false"
        if node.kind == "null":
            return b"null"
        raise Unserializable(f"node kind {node.kind!r} has no PDF encoding")

    out = bytearray(b"%PDF-1.4\n%\xe2\xe3\xcf\xd3\n")
    offsets = {}
    for nid, num in indirect.items():
        node = tree.nodes[nid]
        offsets[num] = len(out)
        out += b"%d 0 obj\n" % num + body(nid)
        if node.kind == "stream":
            data = str(node.value if node.value is not None else "").encode("latin-1", "replace")
            out += b"\nstream\n" + data + b"\nendstream"
        out += b"\nendobj\n"
    size = len(indirect) + len(dangling) + 1
    xref = len(out)
    out += b"xref\n0 %d\n0000000000 65535 f \n" % (len(indirect) + 1)
    for num in range(1, len(indirect) + 1):
        out += b"%010d 00000 n \n" % offsets[num]
    out += b"trailer\n<< /Size %d /Root %d 0 R >>\nstartxref\n%d\n%%%%EOF\n" % (
        size, indirect[tree.root], xref)
    return bytes(out)
