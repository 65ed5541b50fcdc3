"""Attribute knowledge base and the simulated rendering oracle.

No emulator is involved anywhere in this package.  Rendering a layout at an
API level is a declarative fold: every element starts from the default field
values of its widget class, and each attribute applies the render effects the
KB declares for it at that level.  "Compile" and "runtime" failures are
reported in-band on the resulting :class:`RenderState`.

KB file format (JSON)::

    {
      "schema": "confrepair-kb", "version": 1,
      "levels": {"min": 21, "max": 31},
      "elements": {"View": {"parent": null, "defaults": {"mForeground": null}},
                   "FrameLayout": {"parent": "ViewGroup", "composite": ["mForeground"]}},
      "attributes": [{"name": "android:foreground", "applies_to": ["View"],
                      "introduced": 23, "removed": null,
                      "domain": {"kind": "reference"},
                      "effects": [{"field": "mForeground", "rule": "value", "from": 23}]}],
      "known_attributes": ["android:layout_width"],
      "candidates": {"android:gravity": ["android:top"]},
      "resources": ["@drawable/ic_play"],
      "framework_resource_prefixes": ["?android:attr/", "@android:"]
    }

Every section is optional; ``{}`` is an empty but valid KB.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping

from .xmlmodel import AttrName, XmlElement

__all__ = [
    "ApiLevel",
    "ValueDomain",
    "RenderEffect",
    "AttributeSpec",
    "ElementSpec",
    "KnowledgeBase",
    "RenderState",
    "Issue",
    "KbSchemaError",
    "KbInconsistent",
    "load_kb",
    "kb_from_dict",
    "default_kb",
    "render",
    "candidate_attributes",
    "normalize_value",
]

ApiLevel = int

KB_SCHEMA = "confrepair-kb"
KB_VERSION = 1
DEFAULT_MIN_LEVEL = 21
DEFAULT_MAX_LEVEL = 31

# Emulator screens in the reference setup are 560 dpi.
PX_PER_DP = 3.5

Scalar = Any  # float | str | bool | None


class KbSchemaError(ValueError):
    def __init__(self, path, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = path
        self.reason = reason


class KbInconsistent(ValueError):
    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


@dataclass(frozen=True)
class ValueDomain:
    kind: str  # enum | flags | dimension | reference | text
    values: tuple[str, ...] = ()
    grid: tuple[float, ...] | None = None
    keywords: tuple[str, ...] = ("wrap_content", "match_parent")
    types: tuple[str, ...] = ()  # reference resource types, e.g. ("drawable", "color")

    KINDS = ("enum", "flags", "dimension", "reference", "text")


@dataclass(frozen=True)
class RenderEffect:
    field: str
    rule: Any  # "value" | {"const": x} | {"map": {...}, "default": x} | {"format": "..."}
    effective_from: int


@dataclass(frozen=True)
class AttributeSpec:
    name: AttrName
    applies_to: tuple[str, ...]  # widget classes, or ("*",)
    introduced_level: int
    removed_level: int | None
    value_domain: ValueDomain
    render_effects: tuple[RenderEffect, ...] = ()

    def active_at(self, level: int) -> bool:
        if level < self.introduced_level:
            return False
        return self.removed_level is None or level < self.removed_level


@dataclass(frozen=True)
class ElementSpec:
    tag: str
    parent: str | None
    defaults: Mapping[str, Any] = field(default_factory=dict)
    composite: tuple[str, ...] = ()


@dataclass(frozen=True)
class Issue:
    """A static problem with a layout: ``kind`` is resource, attribute or class."""

    kind: str
    detail: str
    attr: str | None = None


@dataclass(eq=False)
class KnowledgeBase:
    min_level: int = DEFAULT_MIN_LEVEL
    max_level: int = DEFAULT_MAX_LEVEL
    elements: dict[str, ElementSpec] = field(default_factory=dict)
    specs: dict[tuple[str, AttrName], AttributeSpec] = field(default_factory=dict)
    known_attributes: frozenset = frozenset()
    candidate_rules: dict[AttrName, tuple[AttrName, ...]] = field(default_factory=dict)
    resources: frozenset = frozenset()
    framework_prefixes: tuple[str, ...] = ()
    source: str = "<memory>"

    def __post_init__(self):
        self._by_name: dict[AttrName, list[AttributeSpec]] = {}
        for (_, name), spec in self.specs.items():
            self._by_name.setdefault(name, []).append(spec)
        self._chain_cache: dict[str, tuple[str, ...] | None] = {}
        self._lookup_cache: dict[tuple[str, AttrName], AttributeSpec | None] = {}
        self._issue_cache: dict[tuple[str, AttrName, str], Issue | None] = {}

    # -- classes ---------------------------------------------------------------
    def class_chain(self, tag: str) -> tuple[str, ...] | None:
        """``(tag, parent, grandparent, ...)`` or None for an unknown class."""
        if tag in self._chain_cache:
            return self._chain_cache[tag]
        chain: list[str] | None = []
        cur: str | None = tag
        while cur is not None:
            spec = self.elements.get(cur)
            if spec is None or cur in chain:
                chain = None
                break
            chain.append(cur)
            cur = spec.parent
        result = tuple(chain) if chain else None
        self._chain_cache[tag] = result
        return result

    def knows_tag(self, tag: str) -> bool:
        return self.class_chain(tag) is not None

    # -- attributes ------------------------------------------------------------
    def lookup(self, tag: str, name: AttrName | str) -> AttributeSpec | None:
        """Most specific spec for ``name`` on ``tag`` (walks the class chain)."""
        name = AttrName.parse(name)
        key = (tag, name)
        if key in self._lookup_cache:
            return self._lookup_cache[key]
        found = None
        for cls in self.class_chain(tag) or (tag,):
            found = self.specs.get((cls, name))
            if found is not None:
                break
        else:
            found = self.specs.get(("*", name))
        self._lookup_cache[key] = found
        return found

    def is_registered(self, name: AttrName | str) -> bool:
        name = AttrName.parse(name)
        return name in self._by_name or name in self.known_attributes

    def specs_named(self, name: AttrName | str) -> list[AttributeSpec]:
        return list(self._by_name.get(AttrName.parse(name), ()))

    def domain_for(self, tag: str, name: AttrName | str) -> ValueDomain | None:
        spec = self.lookup(tag, name)
        if spec is not None:
            return spec.value_domain
        named = self.specs_named(name)
        return named[0].value_domain if named else None

    def candidates(self, name: AttrName | str) -> list[AttrName]:
        return list(self.candidate_rules.get(AttrName.parse(name), ()))

    # -- resources -------------------------------------------------------------
    def resolvable(self, value: str) -> bool:
        if value in ("@null", "@empty") or value.startswith(("@+id/", "@id/", "@android:id/")):
            return True
        if value in self.resources:
            return True
        return any(value.startswith(p) for p in self.framework_prefixes)

    def screen(self, element: XmlElement) -> list[Issue]:
        """Compile-time problems in ``element``'s subtree: unknown attributes
        and references that cannot be linked."""
        issues: list[Issue] = []
        for el in element.iter():
            for name, value in el.attributes:
                issue = self._attr_issue(el.tag, name, value)
                if issue is not None:
                    issues.append(issue)
        return issues

    def _attr_issue(self, tag: str, name: AttrName, value: str) -> Issue | None:
        key = (tag, name, value)
        if key not in self._issue_cache:
            self._issue_cache[key] = self._find_attr_issue(tag, name, value)
        return self._issue_cache[key]

    def _find_attr_issue(self, tag: str, name: AttrName, value: str) -> Issue | None:
        if name.is_namespace_decl or name.namespace_prefix == "tools":
            return None
        if is_reference(value) and not self.resolvable(value):
            return Issue("resource", f"resource {value} (in {name}) cannot be linked", str(name))
        if not self.is_registered(name):
            return Issue("attribute", f"attribute {name} not found", str(name))
        domain = self.domain_for(tag, name)
        if domain is not None and normalize_value(domain, value) is _INVALID:
            return Issue("attribute", f"{value!r} is not a valid value for {name}", str(name))
        return None


def is_reference(value: str) -> bool:
    return value.startswith(("@", "?"))


# -- value normalization -----------------------------------------------------------

_INVALID = object()
_DIMENSION = re.compile(r"^(-?\d+(?:\.\d+)?)(dp|dip|sp|px)$")


def normalize_value(domain: ValueDomain, raw: str):
    """Comparable form of ``raw``: dimensions become dp floats, flag sets a
    sorted ``|``-joined token string; returns a sentinel for invalid input."""
    raw = raw.strip()
    if domain.kind == "dimension":
        if raw in domain.keywords:
            return raw
        if is_reference(raw):
            return raw
        m = _DIMENSION.match(raw)
        if not m:
            return _INVALID
        number = float(m.group(1))
        if m.group(2) == "px":
            number /= PX_PER_DP
        return number
    if domain.kind == "enum":
        if domain.values and raw not in domain.values and not is_reference(raw):
            return _INVALID
        return raw
    if domain.kind == "flags":
        tokens = [t.strip() for t in raw.split("|")]
        if not all(tokens) or (domain.values and any(t not in domain.values for t in tokens)):
            return _INVALID
        return "|".join(sorted(set(tokens)))
    return raw


def _apply_rule(rule, value):
    if rule == "value":
        return value
    if isinstance(rule, dict):
        if "const" in rule:
            return rule["const"]
        if "map" in rule:
            key = _fmt(value)
            if key in rule["map"]:
                return rule["map"][key]
            default = rule.get("default", "$value")
            if isinstance(default, dict):
                return _apply_rule(default, value)
            return value if default == "$value" else default
        if "format" in rule:
            return rule["format"].format(value=_fmt(value))
    raise KbInconsistent(f"unknown value-derivation rule {rule!r}")


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:g}"
    return str(value)


# -- loading -------------------------------------------------------------------------

def _level_default(value, level: int):
    if isinstance(value, dict) and "by_level" in value:
        chosen = None
        for lv, v in sorted(value["by_level"].items(), key=lambda kv: int(kv[0])):
            if int(lv) <= level:
                chosen = v
        return chosen
    return value


def kb_from_dict(data: Any, source: str = "<memory>") -> KnowledgeBase:
    if not isinstance(data, dict):
        raise KbSchemaError(source, "top level must be an object")
    if "schema" in data and data["schema"] != KB_SCHEMA:
        raise KbSchemaError(source, f"unexpected schema {data['schema']!r}")
    if "version" in data and data["version"] != KB_VERSION:
        raise KbSchemaError(source, f"unsupported version {data['version']!r}")

    levels = data.get("levels", {})
    min_level = int(levels.get("min", DEFAULT_MIN_LEVEL))
    max_level = int(levels.get("max", DEFAULT_MAX_LEVEL))
    if min_level > max_level:
        raise KbInconsistent(f"level bounds {min_level}..{max_level} are empty")

    elements: dict[str, ElementSpec] = {}
    raw_elements = data.get("elements", {})
    if not isinstance(raw_elements, dict):
        raise KbSchemaError(source, "'elements' must be an object")
    for tag, spec in raw_elements.items():
        if not isinstance(spec, dict):
            raise KbSchemaError(source, f"element {tag!r} must be an object")
        elements[tag] = ElementSpec(
            tag=tag,
            parent=spec.get("parent"),
            defaults=dict(spec.get("defaults", {})),
            composite=tuple(spec.get("composite", ())),
        )
    for tag, spec in elements.items():
        if spec.parent is not None and spec.parent not in elements:
            raise KbInconsistent(f"element {tag} has unknown parent {spec.parent}")

    specs: dict[tuple[str, AttrName], AttributeSpec] = {}
    raw_attrs = data.get("attributes", [])
    if not isinstance(raw_attrs, list):
        raise KbSchemaError(source, "'attributes' must be a list")
    for i, entry in enumerate(raw_attrs):
        try:
            name = AttrName.parse(entry["name"])
            dom = entry.get("domain", {"kind": "text"})
            kind = dom.get("kind", "text")
            if kind not in ValueDomain.KINDS:
                raise KbSchemaError(source, f"attributes[{i}]: unknown domain kind {kind!r}")
            domain = ValueDomain(
                kind=kind,
                values=tuple(dom.get("values", ())),
                grid=tuple(float(g) for g in dom["grid"]) if "grid" in dom else None,
                keywords=tuple(dom.get("keywords", ("wrap_content", "match_parent"))),
                types=tuple(dom.get("types", ())),
            )
            introduced = int(entry.get("introduced", min_level))
            removed = entry.get("removed")
            effects = tuple(
                RenderEffect(e["field"], e.get("rule", "value"), int(e.get("from", introduced)))
                for e in entry.get("effects", ())
            )
            applies_to = tuple(entry.get("applies_to", ("*",)))
        except KbSchemaError:
            raise
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise KbSchemaError(source, f"attributes[{i}]: {exc}") from None
        spec = AttributeSpec(name, applies_to, introduced,
                             int(removed) if removed is not None else None, domain, effects)
        if spec.removed_level is not None and spec.introduced_level > spec.removed_level:
            raise KbInconsistent(f"{name}: introduced {introduced} after removal {removed}")
        for eff in effects:
            if eff.effective_from < spec.introduced_level:
                raise KbInconsistent(
                    f"{name}: effect on {eff.field} starts at {eff.effective_from}, "
                    f"before the attribute exists ({introduced})")
            _check_rule(name, eff.rule)
        for tag in applies_to:
            if tag != "*" and tag not in elements:
                raise KbInconsistent(f"{name} applies to unknown element {tag}")
            if (tag, name) in specs:
                raise KbInconsistent(f"duplicate spec for ({tag}, {name})")
            specs[(tag, name)] = spec

    known = frozenset(AttrName.parse(n) for n in data.get("known_attributes", ()))
    names = {n for _, n in specs}

    rules: dict[AttrName, tuple[AttrName, ...]] = {}
    for src, targets in data.get("candidates", {}).items():
        src_name = AttrName.parse(src)
        tgt = tuple(AttrName.parse(t) for t in targets)
        for t in tgt:
            if t not in names:
                raise KbInconsistent(f"candidate {t} for {src_name} has no attribute spec")
        rules[src_name] = tgt

    return KnowledgeBase(
        min_level=min_level,
        max_level=max_level,
        elements=elements,
        specs=specs,
        known_attributes=known,
        candidate_rules=rules,
        resources=frozenset(data.get("resources", ())),
        framework_prefixes=tuple(data.get("framework_resource_prefixes", ())),
        source=source,
    )


def _check_rule(name, rule):
    if rule == "value":
        return
    if isinstance(rule, dict) and any(k in rule for k in ("const", "map", "format")):
        return
    raise KbInconsistent(f"{name}: unknown value-derivation rule {rule!r}")


def load_kb(path: str | Path) -> KnowledgeBase:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise KbSchemaError(path, f"cannot read: {exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise KbSchemaError(path, f"invalid JSON: {exc}") from None
    return kb_from_dict(data, str(path))


@lru_cache(maxsize=1)
def default_kb() -> KnowledgeBase:
    ref = resources.files("confrepair") / "data" / "default_kb.json"
    with resources.as_file(ref) as path:
        return load_kb(path)


def candidate_attributes(bug_attr: AttrName | str, kb: KnowledgeBase) -> list[AttrName]:
    return kb.candidates(bug_attr)


# -- rendering -------------------------------------------------------------------------

FieldKey = tuple[str, str]  # (element key, field access path)


@dataclass(frozen=True)
class RenderState:
    values: tuple[tuple[FieldKey, Scalar], ...]
    crashes: tuple[Issue, ...] = ()

    @property
    def crashed(self) -> bool:
        return bool(self.crashes)

    @property
    def crash_reason(self) -> str | None:
        return "; ".join(c.detail for c in self.crashes) if self.crashes else None

    def crash_kinds(self) -> set[str]:
        return {c.kind for c in self.crashes}

    def as_dict(self) -> dict[FieldKey, Scalar]:
        return dict(self.values)

    def get(self, key: FieldKey, default=None):
        return self.as_dict().get(key, default)

    def to_json(self) -> dict:
        return {
            "crashed": self.crashed,
            "crashes": [{"kind": c.kind, "detail": c.detail} for c in self.crashes],
            "fields": [{"element": k, "field": f, "value": v} for (k, f), v in self.values],
        }


def render(root: XmlElement, level: ApiLevel, kb: KnowledgeBase) -> RenderState:
    """Field values of every element of ``root`` when run at ``level``."""
    if not kb.min_level <= level <= kb.max_level:
        raise ValueError(f"API level {level} outside {kb.min_level}..{kb.max_level}")
    return _render_cached(root, level, kb)


@lru_cache(maxsize=8192)
def _render_cached(root: XmlElement, level: int, kb: KnowledgeBase) -> RenderState:
    values: dict[FieldKey, Scalar] = {}
    crashes: list[Issue] = []
    used_ids: set[str] = set()
    _render_node(root, (f"{root.tag}[0]",), {}, level, kb, values, crashes, used_ids)
    return RenderState(tuple(sorted(values.items(), key=lambda kv: kv[0])), tuple(crashes))


def _render_node(node, steps, overlay, level, kb, values, crashes, used_ids):
    chain = kb.class_chain(node.tag)
    if chain is None:
        crashes.append(Issue("class", f"ClassNotFoundException: {node.tag}"))
        chain = kb.class_chain("View") or ()

    fields: dict[str, Scalar] = {}
    for cls in reversed(chain):
        for name, value in kb.elements[cls].defaults.items():
            fields[name] = _level_default(value, level)
    defaults = dict(fields)

    for name, raw in sorted(node.attributes, key=lambda kv: kv[0].sort_key()):
        issue = kb._attr_issue(node.tag, name, raw)
        if issue is not None:
            crashes.append(issue)
            continue
        if name.is_namespace_decl or name.namespace_prefix == "tools":
            continue
        spec = kb.lookup(node.tag, name)
        if spec is None or not spec.active_at(level):
            continue
        value = normalize_value(spec.value_domain, raw)
        latest: dict[str, RenderEffect] = {}
        for eff in spec.render_effects:
            if eff.effective_from <= level:
                prev = latest.get(eff.field)
                if prev is None or eff.effective_from >= prev.effective_from:
                    latest[eff.field] = eff
        for fname in sorted(latest):
            fields[fname] = _apply_rule(latest[fname].rule, value)

    composite = ()
    for cls in chain:
        if kb.elements[cls].composite:
            composite = kb.elements[cls].composite
            break
    kids = node.elements

    if composite and len(kids) == 1:
        # A single-child wrapper draws nothing of its own except the
        # composited layers, which land on the child it wraps.
        mine = {f: fields.get(f) for f in composite if fields.get(f) != defaults.get(f)}
        child = kids[0]
        child_steps = steps[:-1] + (f"{child.tag}[{_step_index(steps[-1])}]",)
        _render_node(child, child_steps, {**mine, **overlay}, level, kb, values, crashes, used_ids)
        return

    fields.update(overlay)
    rid = node.resource_id
    if rid and rid not in used_ids:
        used_ids.add(rid)
        key = f"id/{rid}"
    else:
        key = "/".join(steps)
    for fname, v in fields.items():
        values[(key, fname)] = v

    for i, child in enumerate(kids):
        _render_node(child, steps + (f"{child.tag}[{i}]",), {}, level, kb, values, crashes, used_ids)


def _step_index(step: str) -> int:
    return int(step[step.rindex("[") + 1 : -1])
