"""Fitness-guided patch search for compatibility bugs.

Three pieces live here: key-field identification (which rendered fields the
issue-inducing attributes actually drive), a normalized fitness score over
those fields, and two ways of turning scored one-line patches into a repair
(take a perfect single patch, or sample score-weighted combinations).
"""

from __future__ import annotations

import itertools
import random
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

from .kb import (
    FieldKey,
    KnowledgeBase,
    RenderState,
    ValueDomain,
    _INVALID,
    normalize_value,
    render,
)
from .xmlmodel import (
    AttrName,
    ElementLocator,
    Patch,
    RemoveAttr,
    SetAttr,
    XmlElement,
    ancestors_at,
    apply_patch,
    element_at,
)

__all__ = [
    "CompatBug",
    "BugInvalid",
    "KeyFieldSet",
    "KeyFieldResult",
    "FitnessScore",
    "FitnessInapplicable",
    "CandidatePatch",
    "CombinedResult",
    "identify_key_fields",
    "fdiff",
    "field_distance",
    "fitness_score",
    "enumerate_values",
    "search_single_line_patches",
    "find_strategy1",
    "sample_combined_patches",
    "combine",
    "DEFAULT_SEARCH_BUDGET",
    "DEFAULT_N_SAMPLES",
]

EPSILON = 1e-9
DEFAULT_SEARCH_BUDGET = 50
DEFAULT_N_SAMPLES = 10
DEFAULT_DIMENSION_GRID = (0.0, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0, 256.0, 512.0)


class BugInvalid(ValueError):
    pass


class FitnessInapplicable(Exception):
    """The fitness function cannot judge this document; callers may treat the
    candidate as possibly correct."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


@dataclass(frozen=True)
class CompatBug:
    document: XmlElement
    locator: ElementLocator
    issue_attrs: frozenset
    conflicting_levels: tuple[int, int]
    target_level: int = 31
    bug_id: str = ""

    def __post_init__(self):
        attrs = frozenset(AttrName.parse(a) for a in self.issue_attrs)
        object.__setattr__(self, "issue_attrs", attrs)
        object.__setattr__(self, "conflicting_levels", tuple(int(x) for x in self.conflicting_levels))
        if not attrs:
            raise BugInvalid("issue attribute set is empty")
        low, high = self.conflicting_levels
        if high != low + 1:
            raise BugInvalid(f"conflicting levels {self.conflicting_levels} are not neighbours")
        if high > self.target_level:
            raise BugInvalid(f"target level {self.target_level} is below {high}")
        idx = self.locator.resolve_indices(self.document)
        if idx is None:
            raise BugInvalid("bug locator does not resolve in the document")
        element = element_at(self.document, idx)
        missing = sorted(str(a) for a in attrs if not element.has(a))
        if missing:
            raise BugInvalid(f"issue attributes not on <{element.tag}>: {', '.join(missing)}")

    @property
    def indices(self) -> tuple[int, ...]:
        return self.locator.resolve_indices(self.document)

    @property
    def element(self) -> XmlElement:
        return element_at(self.document, self.indices)

    @property
    def sorted_attrs(self) -> list[AttrName]:
        return sorted(self.issue_attrs, key=AttrName.sort_key)

    @property
    def levels(self) -> tuple[int, int, int]:
        return (*self.conflicting_levels, self.target_level)

    def stripped(self) -> XmlElement:
        """The document with every issue-inducing attribute removed."""
        return apply_patch(self.document, Patch(tuple(RemoveAttr(self.locator, a) for a in self.sorted_attrs)))


@dataclass(frozen=True)
class KeyFieldSet:
    fields: tuple[FieldKey, ...]
    baseline: RenderState  # app at the target level, restricted to fields
    stripped_baseline: RenderState  # same for the stripped document

    def __post_init__(self):
        if not self.fields:
            raise ValueError("key field set is empty")
        if fdiff(self.baseline, self.stripped_baseline, self.fields) == 0:
            raise ValueError("baseline and stripped baseline agree on every key field")

    @property
    def denominator(self) -> float:
        return fdiff(self.stripped_baseline, self.baseline, self.fields)

    def __iter__(self):
        return iter(self.fields)

    def __len__(self):
        return len(self.fields)


@dataclass(frozen=True)
class KeyFieldResult:
    key_fields: KeyFieldSet | None
    candidates: tuple[AttrName, ...]


def _restrict(state: RenderState, fields: Iterable[FieldKey]) -> RenderState:
    keep = set(fields)
    return RenderState(tuple(kv for kv in state.values if kv[0] in keep), state.crashes)


def identify_key_fields(bug: CompatBug, kb: KnowledgeBase) -> KeyFieldResult:
    candidates: list[AttrName] = []
    for a in bug.sorted_attrs:
        for c in kb.candidates(a):
            if c not in candidates:
                candidates.append(c)

    app = render(bug.document, bug.target_level, kb).as_dict()
    stripped = render(bug.stripped(), bug.target_level, kb).as_dict()
    fields = tuple(sorted(k for k in set(app) | set(stripped)
                          if k not in app or k not in stripped or app[k] != stripped[k]))
    if not fields:
        return KeyFieldResult(None, tuple(candidates))
    base = _restrict(render(bug.document, bug.target_level, kb), fields)
    base_stripped = _restrict(render(bug.stripped(), bug.target_level, kb), fields)
    return KeyFieldResult(KeyFieldSet(fields, base, base_stripped), tuple(candidates))


# -- distance and score ----------------------------------------------------------

_MISSING = object()


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def field_distance(a, b) -> float:
    if a is _MISSING or b is _MISSING:
        return 0.0 if a is b else 1.0
    if _is_number(a) and _is_number(b):
        if a == b:
            return 0.0
        return abs(a - b) / (abs(a) + abs(b) + EPSILON)
    if type(a) is not type(b):
        return 1.0
    return 0.0 if a == b else 1.0


def fdiff(state_a: RenderState, state_b: RenderState, fields: Iterable[FieldKey]) -> float:
    da, db = state_a.as_dict(), state_b.as_dict()
    return sum(field_distance(da.get(f, _MISSING), db.get(f, _MISSING)) for f in fields)


@dataclass(frozen=True)
class FitnessScore:
    score: float
    cross_level_consistent: bool
    crashed: bool
    crash_reason: str | None = None
    per_field_diffs: tuple = ()  # ((field, (value in app_rc, value in app)), ...)
    cross_level_diffs: tuple = ()  # ((field, (value at l, value at l+1)), ...)

    @property
    def accepted(self) -> bool:
        return self.score == 1.0 and self.cross_level_consistent and not self.crashed

    @property
    def rank(self) -> tuple:
        """Sort key: non-crashing beats crashing, then consistent beats
        inconsistent, then higher score."""
        return (not self.crashed, self.cross_level_consistent, self.score)

    def to_json(self) -> dict:
        return {
            "score": self.score,
            "cross_level_consistent": self.cross_level_consistent,
            "crashed": self.crashed,
            "crash_reason": self.crash_reason,
            "per_field_diffs": [
                {"element": f[0], "field": f[1], "repaired": rc, "original": app}
                for f, (rc, app) in self.per_field_diffs
            ],
        }


def _check_same_element(app_rc: XmlElement, bug: CompatBug) -> None:
    idx = bug.locator.resolve_indices(app_rc)
    if idx is None:
        raise FitnessInapplicable("the issue-inducing element cannot be found in the repair")
    if element_at(app_rc, idx).tag != bug.element.tag:
        raise FitnessInapplicable("the issue-inducing element was replaced by a different element")
    before = [e.tag for e in ancestors_at(bug.document, bug.indices)]
    after = [e.tag for e in ancestors_at(app_rc, idx)]
    if before != after:
        raise FitnessInapplicable("the issue-inducing element was wrapped or moved")


def fitness_score(app_rc: XmlElement, bug: CompatBug, F: KeyFieldSet | None,
                  kb: KnowledgeBase) -> FitnessScore:
    if F is None:
        raise FitnessInapplicable("no key fields were identified")
    _check_same_element(app_rc, bug)
    low, high = bug.conflicting_levels
    at_t = render(app_rc, bug.target_level, kb)
    at_l = render(app_rc, low, kb)
    at_h = render(app_rc, high, kb)
    crashes = []
    for st in (at_l, at_h, at_t):
        for c in st.crashes:
            if c not in crashes:
                crashes.append(c)

    score = 1.0 - fdiff(at_t, F.baseline, F.fields) / F.denominator
    consistent = fdiff(at_l, at_h, F.fields) == 0

    t, base, lo, hi = at_t.as_dict(), F.baseline.as_dict(), at_l.as_dict(), at_h.as_dict()
    per_field = tuple((f, (t.get(f), base.get(f))) for f in F.fields
                      if field_distance(t.get(f, _MISSING), base.get(f, _MISSING)) > 0)
    cross = tuple((f, (lo.get(f), hi.get(f))) for f in F.fields
                  if field_distance(lo.get(f, _MISSING), hi.get(f, _MISSING)) > 0)
    return FitnessScore(
        score=score,
        cross_level_consistent=consistent,
        crashed=bool(crashes),
        crash_reason="; ".join(c.detail for c in crashes) or None,
        per_field_diffs=per_field,
        cross_level_diffs=cross,
    )


# -- single one-line patches ----------------------------------------------------------

@dataclass(frozen=True)
class CandidatePatch:
    patch: Patch
    fitness: FitnessScore
    attr: AttrName  # attribute written, or removed for a removal patch
    chosen_value: str | None  # None for a removal patch
    evaluations: int = 1

    @property
    def target(self) -> AttrName:
        return self.attr

    @property
    def is_removal(self) -> bool:
        return self.chosen_value is None

    def describe(self) -> str:
        edit = self.patch.edits[0]
        if isinstance(edit, RemoveAttr):
            return f"remove {edit.name}"
        if edit.replaces is not None and edit.replaces != edit.name:
            return f'replace {edit.replaces} with {edit.name}="{edit.value}"'
        return f'set {edit.name}="{edit.value}"'


def _fmt_dp(x: float) -> str:
    return f"{x:g}dp"


def enumerate_values(domain: ValueDomain, kb: KnowledgeBase,
                     original: str | None = None) -> Iterator[str]:
    """Values to try for an attribute, in a fixed order.

    A valid ``original`` value comes first.  Then: enum values as listed;
    flag sets by size, then lexicographically; dimension keywords followed
    by the grid (KB grid or 0, 1, 2, 4, ... 512 dp); references from the
    resource registry of a matching type, sorted.
    """
    seen: set = set()

    def fresh(v):
        key = normalize_value(domain, v)
        if key is _INVALID or key in seen:
            return False
        seen.add(key)
        return True

    if original is not None and fresh(original):
        yield original
    if domain.kind == "enum":
        for v in domain.values:
            if fresh(v):
                yield v
    elif domain.kind == "flags":
        for size in range(1, len(domain.values) + 1):
            for combo in itertools.combinations(sorted(domain.values), size):
                v = "|".join(combo)
                if fresh(v):
                    yield v
    elif domain.kind == "dimension":
        for k in domain.keywords:
            if fresh(k):
                yield k
        for g in domain.grid if domain.grid is not None else DEFAULT_DIMENSION_GRID:
            v = _fmt_dp(g)
            if fresh(v):
                yield v
    elif domain.kind == "reference":
        prefixes = tuple(f"@{t}/" for t in domain.types)
        for ref in sorted(kb.resources):
            if (not prefixes or ref.startswith(prefixes)) and fresh(ref):
                yield ref


TraceFn = Callable[[Patch, "FitnessScore | None", str | None], None]


def _evaluate(bug, F, kb, patch, trace: TraceFn | None) -> FitnessScore:
    fs = fitness_score(apply_patch(bug.document, patch), bug, F, kb)
    if trace is not None:
        trace(patch, fs, None)
    return fs


def _replaced_attr(bug: CompatBug, candidate: AttrName, kb: KnowledgeBase) -> AttrName:
    if candidate in bug.issue_attrs:
        return candidate
    for a in bug.sorted_attrs:
        if candidate in kb.candidates(a):
            return a
    return bug.sorted_attrs[0]


def search_single_line_patches(bug: CompatBug, F: KeyFieldSet, candidates: Sequence[AttrName],
                               kb: KnowledgeBase, budget: int = DEFAULT_SEARCH_BUDGET,
                               trace: TraceFn | None = None) -> list[CandidatePatch]:
    """Best-scoring value per candidate attribute, then one removal patch per
    issue-inducing attribute.  ``budget`` caps fitness evaluations per candidate."""
    if budget < 1:
        raise ValueError("budget must be at least 1")
    element = bug.element
    out: list[CandidatePatch] = []
    for cand in candidates:
        cand = AttrName.parse(cand)
        spec = kb.lookup(element.tag, cand)
        if spec is None:
            continue
        replaced = _replaced_attr(bug, cand, kb)
        best: CandidatePatch | None = None
        used = 0
        for value in enumerate_values(spec.value_domain, kb, element.get(replaced)):
            if used >= budget:
                break
            patch = Patch((SetAttr(bug.locator, cand, value, replaces=replaced),))
            fs = _evaluate(bug, F, kb, patch, trace)
            used += 1
            if best is None or fs.rank > best.fitness.rank:
                best = CandidatePatch(patch, fs, cand, value)
            if fs.accepted:
                break
        if best is not None:
            out.append(CandidatePatch(best.patch, best.fitness, best.attr, best.chosen_value, used))
    for a in bug.sorted_attrs:
        patch = Patch((RemoveAttr(bug.locator, a),))
        out.append(CandidatePatch(patch, _evaluate(bug, F, kb, patch, trace), a, None))
    return out


def find_strategy1(patches: Sequence[CandidatePatch]) -> CandidatePatch | None:
    for p in patches:
        if p.fitness.accepted:
            return p
    return None


# -- combinations -------------------------------------------------------------------

@dataclass(frozen=True)
class CombinedResult:
    patch: Patch
    fitness: FitnessScore
    included: tuple[int, ...]  # indices into the input patch list
    draws: int = 0
    distinct_evaluations: int = 0


def combine(patches: Sequence[CandidatePatch], chosen: Iterable[int]) -> tuple[tuple[int, ...], Patch]:
    """Merge the chosen single patches.  When two of them write the same
    attribute only the higher-scoring one is kept (earlier wins ties)."""
    by_attr: dict[AttrName, int] = {}
    for i in sorted(set(chosen)):
        key = patches[i].target
        j = by_attr.get(key)
        if j is None or patches[i].fitness.rank > patches[j].fitness.rank:
            by_attr[key] = i
    kept = tuple(sorted(by_attr.values()))
    edits = tuple(e for i in kept for e in patches[i].patch.edits)
    return kept, Patch(edits)


def _inclusion_probabilities(patches: Sequence[CandidatePatch]) -> list[float]:
    probs = [0.0 if p.fitness.crashed else min(1.0, max(0.0, p.fitness.score)) for p in patches]
    if all(p == 0.0 for p in probs):
        return [1.0 / len(patches)] * len(patches)
    return probs


def sample_combined_patches(patches: Sequence[CandidatePatch], bug: CompatBug, F: KeyFieldSet,
                            kb: KnowledgeBase, n_samples: int = DEFAULT_N_SAMPLES,
                            rng_seed: int = 0, trace: TraceFn | None = None) -> CombinedResult:
    """Draw ``n_samples`` inclusion vectors with each patch's clamped score as
    its probability and return the fitness-best combination (first drawn wins
    ties).  Crashing single patches get probability zero."""
    if not patches:
        raise ValueError("no single one-line patches to combine")
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    probs = _inclusion_probabilities(patches)
    rng = random.Random(rng_seed)
    memo: dict[tuple[int, ...], FitnessScore] = {}
    best: CombinedResult | None = None
    for _ in range(n_samples):
        drawn = [i for i, p in enumerate(probs) if rng.random() < p]
        kept, patch = combine(patches, drawn)
        fs = memo.get(kept)
        if fs is None:
            fs = _evaluate(bug, F, kb, patch, trace)
            memo[kept] = fs
        if best is None or fs.rank > best.fitness.rank:
            best = CombinedResult(patch, fs, kept)
    return CombinedResult(best.patch, best.fitness, best.included, n_samples, len(memo))
