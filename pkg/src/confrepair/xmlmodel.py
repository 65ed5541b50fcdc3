"""Layout documents with a canonical form and an invertible patch algebra.

Only the XML subset Android layouts use is modeled.  Comments, CDATA
sections, processing instructions and non-blank text survive parsing as
:class:`Opaque` children; they are written back by the canonical
serializer but never take part in equality or rendering.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Iterable, Iterator, Sequence, Union
from xml.parsers import expat

__all__ = [
    "AttrName",
    "Opaque",
    "XmlElement",
    "ElementLocator",
    "SetAttr",
    "RemoveAttr",
    "ReplaceTag",
    "WrapElement",
    "InsertSiblingAttrCarrier",
    "ReplaceElement",
    "UnwrapElement",
    "RemoveElement",
    "Patch",
    "MalformedXml",
    "LocatorUnresolved",
    "parse_document",
    "serialize_canonical",
    "apply_patch",
    "invert_patch",
    "canonical_equal",
    "splice_element",
    "edit_to_json",
    "edit_from_json",
]

# Prefixes every layout may use without declaring them (LLM replies are
# bare element fragments).
IMPLICIT_PREFIXES = {
    "android": "http://schemas.android.com/apk/res/android",
    "app": "http://schemas.android.com/apk/res-auto",
    "tools": "http://schemas.android.com/tools",
    "xml": "http://www.w3.org/XML/1998/namespace",
}

ANDROID_ID = None  # set below, after AttrName exists

INDENT = "    "


class MalformedXml(ValueError):
    def __init__(self, position: int, reason: str):
        super().__init__(f"malformed XML at byte {position}: {reason}")
        self.position = position
        self.reason = reason


class LocatorUnresolved(LookupError):
    def __init__(self, edit_index: int, detail: str = ""):
        msg = f"edit #{edit_index}: locator does not resolve"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.edit_index = edit_index


@dataclass(frozen=True, order=True)
class AttrName:
    """Qualified attribute name such as ``android:foreground``."""

    namespace_prefix: str | None
    local: str

    def __post_init__(self):
        if not self.local or re.search(r"[\s:]", self.local):
            raise ValueError(f"invalid attribute local name {self.local!r}")
        if self.namespace_prefix is not None and (
            not self.namespace_prefix or re.search(r"[\s:]", self.namespace_prefix)
        ):
            raise ValueError(f"invalid namespace prefix {self.namespace_prefix!r}")

    @classmethod
    def parse(cls, qname: str) -> "AttrName":
        if isinstance(qname, AttrName):
            return qname
        prefix, sep, local = qname.partition(":")
        if not sep:
            return cls(None, qname)
        return cls(prefix, local)

    @property
    def is_namespace_decl(self) -> bool:
        return self.namespace_prefix == "xmlns" or (
            self.namespace_prefix is None and self.local == "xmlns"
        )

    def sort_key(self) -> tuple:
        return (0 if self.is_namespace_decl else 1, self.namespace_prefix or "", self.local)

    def __str__(self) -> str:
        if self.namespace_prefix is None:
            return self.local
        return f"{self.namespace_prefix}:{self.local}"


ANDROID_ID = AttrName("android", "id")


@dataclass(frozen=True)
class Opaque:
    """A comment, CDATA section, processing instruction or text run."""

    kind: str  # "comment" | "cdata" | "pi" | "text"
    text: str


@dataclass(frozen=True, eq=False)
class XmlElement:
    tag: str
    attributes: tuple[tuple[AttrName, str], ...] = ()
    children: tuple[Union["XmlElement", Opaque], ...] = ()
    source_span: tuple[int, int] | None = None

    def __post_init__(self):
        names = [n for n, _ in self.attributes]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate attribute on <{self.tag}>")

    # Structural equality: attribute order, opaque children and spans are
    # irrelevant.
    def _key(self):
        return (
            self.tag,
            frozenset(self.attributes),
            tuple(c for c in self.children if isinstance(c, XmlElement)),
        )

    def __eq__(self, other):
        if not isinstance(other, XmlElement):
            return NotImplemented
        return self._key() == other._key()

    def __hash__(self):
        return self._hash

    @cached_property
    def _hash(self) -> int:
        return hash(self._key())

    @property
    def attrs(self) -> dict[AttrName, str]:
        return dict(self.attributes)

    def get(self, name: AttrName | str, default=None):
        name = AttrName.parse(name)
        for n, v in self.attributes:
            if n == name:
                return v
        return default

    def has(self, name: AttrName | str) -> bool:
        return self.get(name) is not None

    @property
    def elements(self) -> tuple["XmlElement", ...]:
        return tuple(c for c in self.children if isinstance(c, XmlElement))

    @property
    def resource_id(self) -> str | None:
        value = self.get(ANDROID_ID)
        return normalize_id(value) if value else None

    def with_attr(self, name: AttrName, value: str) -> "XmlElement":
        attrs = list(self.attributes)
        for i, (n, _) in enumerate(attrs):
            if n == name:
                attrs[i] = (name, value)
                break
        else:
            attrs.append((name, value))
        return replace(self, attributes=tuple(attrs))

    def without_attr(self, name: AttrName) -> "XmlElement":
        return replace(self, attributes=tuple((n, v) for n, v in self.attributes if n != name))

    def iter(self) -> Iterator["XmlElement"]:
        yield self
        for child in self.elements:
            yield from child.iter()


def normalize_id(value: str) -> str:
    for prefix in ("@+id/", "@id/", "@android:id/"):
        if value.startswith(prefix):
            return value[len(prefix):]
    return value


# -- parsing -----------------------------------------------------------------

_TRUNCATION_ERRORS = {
    expat.errors.codes[expat.errors.XML_ERROR_UNCLOSED_TOKEN],
    expat.errors.codes[expat.errors.XML_ERROR_NO_ELEMENTS],
    expat.errors.codes[expat.errors.XML_ERROR_PARTIAL_CHAR],
    expat.errors.codes[expat.errors.XML_ERROR_UNCLOSED_CDATA_SECTION],
}


class _Builder:
    def __init__(self, data: bytes):
        self.data = data
        self.stack: list[list] = []  # [tag, attrs, children, start, nsmap]
        self.root: XmlElement | None = None
        self.text: list[str] = []
        self.in_cdata = False

    def _flush_text(self):
        if not self.text:
            return
        text = "".join(self.text)
        self.text = []
        if self.in_cdata:
            return
        if text.strip() and self.stack:
            self.stack[-1][2].append(Opaque("text", text.strip()))

    def start(self, parser, tag, attrs):
        self._flush_text()
        start = parser.CurrentByteIndex
        nsmap = dict(self.stack[-1][4]) if self.stack else dict(IMPLICIT_PREFIXES)
        pairs = []
        for i in range(0, len(attrs), 2):
            name = AttrName.parse(attrs[i])
            if name.namespace_prefix == "xmlns":
                nsmap[name.local] = attrs[i + 1]
            pairs.append((name, attrs[i + 1]))
        for name, _ in pairs:
            p = name.namespace_prefix
            if p is not None and p != "xmlns" and p not in nsmap:
                raise MalformedXml(start, f"undeclared namespace prefix {p!r}")
        if ":" in tag:
            p = tag.split(":", 1)[0]
            if p not in nsmap:
                raise MalformedXml(start, f"undeclared namespace prefix {p!r}")
        self.stack.append([tag, tuple(pairs), [], start, nsmap])

    def end(self, parser, tag):
        self._flush_text()
        name, pairs, children, start, _ = self.stack.pop()
        idx = parser.CurrentByteIndex
        if idx > start and self.data[idx - 2:idx] == b"/>":
            end = idx  # self-closing: expat reports the offset past "/>"
        else:
            close = self.data.find(b">", max(idx, start))
            end = close + 1 if close >= 0 else len(self.data)
        element = XmlElement(name, pairs, tuple(children), (start, end))
        if self.stack:
            self.stack[-1][2].append(element)
        else:
            self.root = element

    def comment(self, text):
        self._flush_text()
        if self.stack:
            self.stack[-1][2].append(Opaque("comment", text))

    def pi(self, target, data):
        self._flush_text()
        if self.stack:
            self.stack[-1][2].append(Opaque("pi", f"{target} {data}".strip()))

    def chars(self, text):
        self.text.append(text)

    def start_cdata(self):
        self._flush_text()
        self.in_cdata = True

    def end_cdata(self):
        text = "".join(self.text)
        self.text = []
        self.in_cdata = False
        if self.stack:
            self.stack[-1][2].append(Opaque("cdata", text))


def parse_document(data: bytes | str) -> XmlElement:
    """Parse a UTF-8 layout document and return its root element."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    parser = expat.ParserCreate("utf-8")
    parser.ordered_attributes = True
    builder = _Builder(data)
    parser.StartElementHandler = lambda tag, attrs: builder.start(parser, tag, attrs)
    parser.EndElementHandler = lambda tag: builder.end(parser, tag)
    parser.CommentHandler = builder.comment
    parser.ProcessingInstructionHandler = builder.pi
    parser.CharacterDataHandler = builder.chars
    parser.StartCdataSectionHandler = builder.start_cdata
    parser.EndCdataSectionHandler = builder.end_cdata
    try:
        parser.Parse(data, True)
    except expat.ExpatError as exc:
        reason = expat.errors.messages[exc.code]
        position = len(data) if exc.code in _TRUNCATION_ERRORS else parser.ErrorByteIndex
        raise MalformedXml(position, reason) from None
    except ValueError as exc:  # invalid attribute names
        if isinstance(exc, MalformedXml):
            raise
        raise MalformedXml(parser.CurrentByteIndex, str(exc)) from None
    if builder.root is None:
        raise MalformedXml(len(data), "no root element")
    return builder.root


# -- canonical serialization -------------------------------------------------

def _escape_attr(value: str) -> str:
    return (
        value.replace("&", "&amp;")
        .replace("<", "&lt;")
        .replace(">", "&gt;")
        .replace('"', "&quot;")
        .replace("\n", "&#10;")
        .replace("\r", "&#13;")
        .replace("\t", "&#9;")
    )


def _escape_text(value: str) -> str:
    return value.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _write(node, depth: int, out: list[str], include_opaque: bool) -> None:
    pad = INDENT * depth
    if isinstance(node, Opaque):
        if not include_opaque:
            return
        if node.kind == "comment":
            out.append(f"{pad}<!--{node.text}-->")
        elif node.kind == "cdata":
            out.append(f"{pad}<![CDATA[{node.text}]]>")
        elif node.kind == "pi":
            out.append(f"{pad}<?{node.text}?>")
        else:
            out.append(pad + _escape_text(node.text))
        return
    children = [c for c in node.children if include_opaque or isinstance(c, XmlElement)]
    attrs = sorted(node.attributes, key=lambda kv: kv[0].sort_key())
    lines = [f"{pad}<{node.tag}"]
    for name, value in attrs:
        lines.append(f'{pad}{INDENT}{name}="{_escape_attr(value)}"')
    if not children:
        lines[-1] += "/>"
        out.extend(lines)
        return
    lines[-1] += ">"
    out.extend(lines)
    for child in children:
        _write(child, depth + 1, out, include_opaque)
    out.append(f"{pad}</{node.tag}>")


def serialize_canonical(root: XmlElement, *, include_opaque: bool = True) -> bytes:
    """Deterministic UTF-8 rendering of ``root``.

    Attributes are sorted (namespace declarations first, then by prefix and
    local name), each attribute sits on its own line, nesting is indented by
    four spaces and the output ends with a newline.
    """
    out: list[str] = []
    _write(root, 0, out, include_opaque)
    return ("\n".join(out) + "\n").encode("utf-8")


def canonical_equal(a: XmlElement, b: XmlElement) -> bool:
    return serialize_canonical(a, include_opaque=False) == serialize_canonical(
        b, include_opaque=False
    )


# -- locators ----------------------------------------------------------------

@dataclass(frozen=True)
class ElementLocator:
    """Finds one element: by ``android:id`` first, else by a tag/index path.

    ``path`` steps go downward from the root; each step is ``(tag, i)``
    meaning the i-th element child (opaque nodes are not counted), whose tag
    must be ``tag``.  The empty path is the root itself.
    """

    path: tuple[tuple[str, int], ...] = ()
    resource_id: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "path", tuple((str(t), int(i)) for t, i in self.path))
        if self.resource_id is not None:
            object.__setattr__(self, "resource_id", normalize_id(self.resource_id))

    def resolve_indices(self, root: XmlElement) -> tuple[int, ...] | None:
        if self.resource_id is not None:
            hits = [p for p, el in _walk(root, ()) if el.resource_id == self.resource_id]
            if len(hits) == 1:
                return hits[0]
            if len(hits) > 1:
                return None
        node = root
        indices = []
        for tag, i in self.path:
            kids = node.elements
            if i < 0 or i >= len(kids) or kids[i].tag != tag:
                return None
            node = kids[i]
            indices.append(i)
        return tuple(indices)

    def resolve(self, root: XmlElement) -> XmlElement | None:
        idx = self.resolve_indices(root)
        return None if idx is None else element_at(root, idx)

    @classmethod
    def for_indices(cls, root: XmlElement, indices: Sequence[int]) -> "ElementLocator":
        node = root
        path = []
        for i in indices:
            node = node.elements[i]
            path.append((node.tag, i))
        return cls(tuple(path), node.resource_id)

    def to_json(self) -> dict:
        data: dict = {"path": [[t, i] for t, i in self.path]}
        if self.resource_id is not None:
            data["resource_id"] = self.resource_id
        return data

    @classmethod
    def from_json(cls, data: dict) -> "ElementLocator":
        return cls(tuple(tuple(s) for s in data.get("path", ())), data.get("resource_id"))


def _walk(node: XmlElement, prefix: tuple[int, ...]):
    yield prefix, node
    for i, child in enumerate(node.elements):
        yield from _walk(child, prefix + (i,))


def element_at(root: XmlElement, indices: Sequence[int]) -> XmlElement:
    node = root
    for i in indices:
        node = node.elements[i]
    return node


def ancestors_at(root: XmlElement, indices: Sequence[int]) -> list[XmlElement]:
    node = root
    chain = []
    for i in indices:
        chain.append(node)
        node = node.elements[i]
    return chain


def _replace_at(node: XmlElement, indices: Sequence[int], fn) -> XmlElement:
    """Rebuild the path to ``indices``; ``fn`` maps the target to a list of nodes."""
    if not indices:
        result = fn(node)
        if len(result) != 1:
            raise ValueError("the root must stay a single element")
        return result[0]
    head, rest = indices[0], indices[1:]
    children = list(node.children)
    seen = -1
    for pos, child in enumerate(children):
        if isinstance(child, XmlElement):
            seen += 1
            if seen == head:
                if rest:
                    children[pos] = _replace_at(child, rest, fn)
                else:
                    children[pos : pos + 1] = fn(child)
                break
    return replace(node, children=tuple(children))


# -- the edit algebra ----------------------------------------------------------

@dataclass(frozen=True)
class SetAttr:
    """Set ``name`` to ``value``; when ``replaces`` names another attribute
    it is dropped in the same edit (a one-line attribute substitution)."""

    locator: ElementLocator
    name: AttrName
    value: str
    replaces: AttrName | None = None


@dataclass(frozen=True)
class RemoveAttr:
    locator: ElementLocator
    name: AttrName


@dataclass(frozen=True)
class ReplaceTag:
    locator: ElementLocator
    new_tag: str


@dataclass(frozen=True)
class WrapElement:
    """Put the element inside a new ``wrapper`` element.  ``moved`` attributes
    leave the element and go onto the wrapper; ``extra`` adds new wrapper
    attributes."""

    locator: ElementLocator
    wrapper: str
    moved: tuple[AttrName, ...] = ()
    extra: tuple[tuple[AttrName, str], ...] = ()


@dataclass(frozen=True)
class InsertSiblingAttrCarrier:
    locator: ElementLocator
    element: XmlElement
    before: bool = False


@dataclass(frozen=True)
class ReplaceElement:
    """Swap the located element (and its subtree) for ``element``."""

    locator: ElementLocator
    element: XmlElement


@dataclass(frozen=True)
class UnwrapElement:
    """Replace a single-child wrapper by its child, moving ``restore``
    attributes from the wrapper back onto the child."""

    locator: ElementLocator
    restore: tuple[AttrName, ...] = ()


@dataclass(frozen=True)
class RemoveElement:
    locator: ElementLocator


Edit = Union[
    SetAttr, RemoveAttr, ReplaceTag, WrapElement, InsertSiblingAttrCarrier,
    ReplaceElement, UnwrapElement, RemoveElement,
]


@dataclass(frozen=True)
class Patch:
    edits: tuple[Edit, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "edits", tuple(self.edits))

    def __len__(self):
        return len(self.edits)

    def __add__(self, other: "Patch") -> "Patch":
        return Patch(self.edits + other.edits)

    def to_json(self) -> list[dict]:
        return [edit_to_json(e) for e in self.edits]

    @classmethod
    def from_json(cls, data: Iterable[dict]) -> "Patch":
        return cls(tuple(edit_from_json(d) for d in data))


def _apply_one(root: XmlElement, edit: Edit, index: int) -> tuple[XmlElement, tuple[int, ...]]:
    """Apply one edit; also return the index path of the edited element
    in the new tree (used to build inverse locators)."""
    idx = edit.locator.resolve_indices(root)
    if idx is None:
        raise LocatorUnresolved(index, repr(edit.locator))

    if isinstance(edit, SetAttr):
        def fn(el):
            if edit.replaces is not None and edit.replaces != edit.name:
                el = el.without_attr(edit.replaces)
            return [el.with_attr(edit.name, edit.value)]
        return _replace_at(root, idx, fn), idx

    if isinstance(edit, RemoveAttr):
        return _replace_at(root, idx, lambda el: [el.without_attr(edit.name)]), idx

    if isinstance(edit, ReplaceTag):
        return _replace_at(root, idx, lambda el: [replace(el, tag=edit.new_tag)]), idx

    if isinstance(edit, WrapElement):
        def fn(el):
            carried = [(n, el.get(n)) for n in edit.moved if el.has(n)]
            inner = el
            for n, _ in carried:
                inner = inner.without_attr(n)
            wrapper = XmlElement(edit.wrapper, tuple(carried) + tuple(edit.extra), (inner,))
            return [wrapper]
        return _replace_at(root, idx, fn), idx

    if isinstance(edit, InsertSiblingAttrCarrier):
        if not idx:
            raise LocatorUnresolved(index, "the root has no siblings")
        new_idx = idx if edit.before else idx[:-1] + (idx[-1] + 1,)
        fn = (lambda el: [edit.element, el]) if edit.before else (lambda el: [el, edit.element])
        return _replace_at(root, idx, fn), new_idx

    if isinstance(edit, ReplaceElement):
        return _replace_at(root, idx, lambda el: [edit.element]), idx

    if isinstance(edit, UnwrapElement):
        target = element_at(root, idx)
        if len(target.elements) != 1:
            raise LocatorUnresolved(index, "unwrap needs exactly one element child")

        def fn(el):
            child = el.elements[0]
            for n in edit.restore:
                if el.has(n):
                    child = child.with_attr(n, el.get(n))
            return [child]
        return _replace_at(root, idx, fn), idx

    if isinstance(edit, RemoveElement):
        if not idx:
            raise LocatorUnresolved(index, "cannot remove the root")
        return _replace_at(root, idx, lambda el: []), idx[:-1]

    raise TypeError(f"unknown edit {edit!r}")


def apply_patch(root: XmlElement, patch: Patch) -> XmlElement:
    """Return a new tree with every edit applied in order; ``root`` is untouched."""
    for i, edit in enumerate(patch.edits):
        root, _ = _apply_one(root, edit, i)
    return root


def _path_locator(root: XmlElement, indices) -> ElementLocator:
    # Inverse edits run against exactly the tree the forward edit produced,
    # so a bare index path is unambiguous (ids may be the thing being undone).
    return ElementLocator(ElementLocator.for_indices(root, indices).path)


def _inverse_one(before: XmlElement, after: XmlElement, edit: Edit, new_idx) -> list[Edit]:
    old_idx = edit.locator.resolve_indices(before)
    old_el = element_at(before, old_idx)

    if isinstance(edit, (SetAttr, RemoveAttr)):
        loc = _path_locator(after, new_idx)
        touched = [edit.name]
        if isinstance(edit, SetAttr) and edit.replaces is not None and edit.replaces != edit.name:
            touched.append(edit.replaces)
        return [
            RemoveAttr(loc, name) if old_el.get(name) is None else SetAttr(loc, name, old_el.get(name))
            for name in touched
        ]

    if isinstance(edit, ReplaceTag):
        return [ReplaceTag(_path_locator(after, new_idx), old_el.tag)]

    if isinstance(edit, WrapElement):
        moved = tuple(n for n in edit.moved if old_el.has(n))
        return [UnwrapElement(_path_locator(after, new_idx), moved)]

    if isinstance(edit, InsertSiblingAttrCarrier):
        return [RemoveElement(_path_locator(after, new_idx))]

    if isinstance(edit, ReplaceElement):
        return [ReplaceElement(_path_locator(after, new_idx), old_el)]

    if isinstance(edit, UnwrapElement):
        # Restoring may overwrite a child value, so put the old subtree back whole.
        return [ReplaceElement(_path_locator(after, new_idx), old_el)]

    if isinstance(edit, RemoveElement):
        parent_idx, pos = old_idx[:-1], old_idx[-1]
        siblings = element_at(after, parent_idx).elements
        if pos > 0:
            return [InsertSiblingAttrCarrier(_path_locator(after, parent_idx + (pos - 1,)), old_el)]
        if siblings:
            return [InsertSiblingAttrCarrier(_path_locator(after, parent_idx + (0,)), old_el, before=True)]
        raise ValueError("cannot invert removal of an only child")

    raise TypeError(f"unknown edit {edit!r}")


def invert_patch(root: XmlElement, patch: Patch) -> Patch:
    """Edits that undo ``patch`` when applied to ``apply_patch(root, patch)``."""
    inverses: list[list[Edit]] = []
    for i, edit in enumerate(patch.edits):
        after, new_idx = _apply_one(root, edit, i)
        inverses.append(_inverse_one(root, after, edit, new_idx))
        root = after
    return Patch(tuple(e for group in reversed(inverses) for e in group))


def splice_element(document: XmlElement, locator: ElementLocator, element: XmlElement) -> XmlElement:
    """Put a repaired element (as returned by an LLM) in place of the located one."""
    return apply_patch(document, Patch((ReplaceElement(locator, element),)))


# -- JSON form of edits ----------------------------------------------------------

def _elem_str(el: XmlElement) -> str:
    return serialize_canonical(el).decode("utf-8")


def edit_to_json(edit: Edit) -> dict:
    loc = edit.locator.to_json()
    if isinstance(edit, SetAttr):
        d = {"op": "set_attr", "locator": loc, "name": str(edit.name), "value": edit.value}
        if edit.replaces is not None:
            d["replaces"] = str(edit.replaces)
        return d
    if isinstance(edit, RemoveAttr):
        return {"op": "remove_attr", "locator": loc, "name": str(edit.name)}
    if isinstance(edit, ReplaceTag):
        return {"op": "replace_tag", "locator": loc, "tag": edit.new_tag}
    if isinstance(edit, WrapElement):
        return {"op": "wrap", "locator": loc, "wrapper": edit.wrapper,
                "moved": [str(n) for n in edit.moved],
                "extra": [[str(n), v] for n, v in edit.extra]}
    if isinstance(edit, InsertSiblingAttrCarrier):
        return {"op": "insert_sibling", "locator": loc, "element": _elem_str(edit.element),
                "before": edit.before}
    if isinstance(edit, ReplaceElement):
        return {"op": "replace_element", "locator": loc, "element": _elem_str(edit.element)}
    if isinstance(edit, UnwrapElement):
        return {"op": "unwrap", "locator": loc, "restore": [str(n) for n in edit.restore]}
    if isinstance(edit, RemoveElement):
        return {"op": "remove_element", "locator": loc}
    raise TypeError(f"unknown edit {edit!r}")


def edit_from_json(d: dict) -> Edit:
    loc = ElementLocator.from_json(d["locator"])
    op = d["op"]
    if op == "set_attr":
        rep = d.get("replaces")
        return SetAttr(loc, AttrName.parse(d["name"]), d["value"],
                       AttrName.parse(rep) if rep else None)
    if op == "remove_attr":
        return RemoveAttr(loc, AttrName.parse(d["name"]))
    if op == "replace_tag":
        return ReplaceTag(loc, d["tag"])
    if op == "wrap":
        return WrapElement(loc, d["wrapper"], tuple(AttrName.parse(n) for n in d.get("moved", ())),
                           tuple((AttrName.parse(n), v) for n, v in d.get("extra", ())))
    if op == "insert_sibling":
        return InsertSiblingAttrCarrier(loc, parse_document(d["element"]), bool(d.get("before", False)))
    if op == "replace_element":
        return ReplaceElement(loc, parse_document(d["element"]))
    if op == "unwrap":
        return UnwrapElement(loc, tuple(AttrName.parse(n) for n in d.get("restore", ())))
    if op == "remove_element":
        return RemoveElement(loc)
    raise ValueError(f"unknown edit op {op!r}")
