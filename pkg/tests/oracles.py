"""Independent reference computations used by the tests.

The brute-force strategy-2 oracle enumerates every inclusion subset of the
candidate attributes and every value choice for each included one, so it
bounds what any sampler over the same single patches can reach.
"""

import itertools

from confrepair.conffix import (
    CompatBug, FitnessInapplicable, enumerate_values, fitness_score, identify_key_fields,
    search_single_line_patches,
)
from confrepair.kb import kb_from_dict
from confrepair.xmlmodel import ElementLocator, Patch, RemoveAttr, SetAttr, apply_patch, parse_document


def synthetic_instance(candidates, targets):
    """Build a KB and bug where a ``Box`` element has numeric fields.

    ``targets`` maps field -> value the buggy attribute sets from level 23.
    ``candidates`` maps attribute local name -> {value: {field: number}}; each
    candidate works on every level.
    """
    fields = sorted(targets)
    attributes = [{
        "name": "android:bug", "applies_to": ["Box"], "introduced": 23,
        "domain": {"kind": "enum", "values": ["on"]},
        "effects": [{"field": f, "rule": {"const": targets[f]}, "from": 23} for f in fields],
    }]
    for name, table in candidates.items():
        touched = sorted({f for effects in table.values() for f in effects})
        attributes.append({
            "name": f"android:{name}", "applies_to": ["Box"],
            "domain": {"kind": "enum", "values": list(table)},
            "effects": [{"field": f, "rule": {"map": {v: eff.get(f, 0.0) for v, eff in table.items()},
                                              "default": 0.0}} for f in touched],
        })
    kb = kb_from_dict({
        "schema": "confrepair-kb", "version": 1,
        "elements": {"Frame": {"parent": None, "defaults": {}},
                     "Box": {"parent": None, "defaults": {f: 0.0 for f in fields}}},
        "attributes": attributes,
        "known_attributes": ["android:id"],
        "candidates": {"android:bug": [f"android:{n}" for n in candidates]},
    }, source="<synthetic>")
    doc = parse_document('<Frame><Box android:id="@+id/box" android:bug="on"/></Frame>')
    bug = CompatBug(doc, ElementLocator((("Box", 0),), "box"), {"android:bug"}, (22, 23), 31, "synthetic")
    return kb, bug


def prepared(bug, kb, budget=50):
    """Key fields plus the single one-line patches the pipeline would build."""
    kf = identify_key_fields(bug, kb)
    patches = search_single_line_patches(bug, kf.key_fields, kf.candidates, kb, budget)
    return kf.key_fields, patches


def brute_force_best(bug, F, patches, kb):
    """Best fitness over every combination of candidate attributes and values.

    Each candidate attribute that appears among ``patches`` is either left
    out or set to any value of its domain; the removal patches may be added
    on top.  Returns (best FitnessScore, its Patch).
    """
    element = bug.element
    setters = [p for p in patches if not p.is_removal]
    removals = [p for p in patches if p.is_removal]
    choices = []
    for p in setters:
        edit = p.patch.edits[0]
        domain = kb.lookup(element.tag, edit.name).value_domain
        values = list(enumerate_values(domain, kb, element.get(edit.replaces)))
        choices.append([None] + [SetAttr(bug.locator, edit.name, v, edit.replaces) for v in values])
    best = best_patch = None
    for combo in itertools.product(*choices):
        for extra in itertools.product([False, True], repeat=len(removals)):
            edits = [e for e in combo if e is not None]
            edits += [RemoveAttr(bug.locator, r.attr) for r, on in zip(removals, extra) if on]
            patch = Patch(tuple(edits))
            try:
                fs = fitness_score(apply_patch(bug.document, patch), bug, F, kb)
            except FitnessInapplicable:
                continue
            if best is None or fs.rank > best.rank:
                best, best_patch = fs, patch
    return best, best_patch


def domain_sizes(bug, patches, kb):
    element = bug.element
    sizes = []
    for p in patches:
        if p.is_removal:
            continue
        edit = p.patch.edits[0]
        domain = kb.lookup(element.tag, edit.name).value_domain
        sizes.append(len(list(enumerate_values(domain, kb, element.get(edit.replaces)))))
    return sizes
