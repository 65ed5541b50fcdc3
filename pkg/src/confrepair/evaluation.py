"""Corpus loading, oracle-based judging, k-run evaluation and reports.

Judging uses the rendering oracle instead of people looking at screens.  A
run is Correct when the repaired layout renders exactly like the original
at the target level, renders the same on both conflicting levels, and never
crashes.
"""

from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from .backends import LlmBackend
from .conffix import BugInvalid, CompatBug, identify_key_fields
from .kb import KnowledgeBase, render
from .orchestrator import RepairConfig, RepairOutcome, load_session, persist_session, repair_bug
from .xmlmodel import (
    AttrName,
    ElementLocator,
    LocatorUnresolved,
    MalformedXml,
    Patch,
    XmlElement,
    apply_patch,
    canonical_equal,
    element_at,
    parse_document,
)

__all__ = [
    "CorpusError",
    "BugRecord",
    "Judgment",
    "CATEGORIES",
    "load_corpus",
    "bundled_corpus_path",
    "bundled_transcripts_path",
    "judge",
    "judge_document",
    "derive_seed",
    "RunResult",
    "MethodReport",
    "EvaluationReport",
    "metrics_from_matrix",
    "evaluate",
    "emit_report",
    "report_from_sessions",
]

CORPUS_SCHEMA = "confrepair-corpus"
REPORT_SCHEMA = "confrepair-report"
REPORT_VERSION = 1

CORRECT, OVERFITTING, FAILED = "Correct", "Overfitting", "Failed"
CATEGORIES = ("C-R", "C-A", "U-I", "R-I", "I-A", "N-I")


class CorpusError(ValueError):
    def __init__(self, record_id: str, reason: str):
        super().__init__(f"{record_id}: {reason}")
        self.record_id = record_id
        self.reason = reason


@dataclass(frozen=True)
class BugRecord:
    id: str
    fixture: Path
    bug: CompatBug
    difficulty: str  # easy or hard
    notes: str = ""
    reference_repair: Patch | None = None
    golden_transcript: Path | None = None


def bundled_corpus_path() -> Path:
    return Path(str(resources.files("confrepair") / "data" / "corpus" / "manifest.json"))


def bundled_transcripts_path() -> Path:
    return Path(str(resources.files("confrepair") / "data" / "corpus" / "transcripts"))


def _manifests(bug: CompatBug, kb: KnowledgeBase) -> bool:
    low, high = bug.conflicting_levels
    return render(bug.document, low, kb) != render(bug.document, high, kb)


def record_from_json(raw: dict, base: Path, kb: KnowledgeBase, check: bool = True) -> BugRecord:
    rid = raw.get("id") or "<no id>"
    try:
        fixture = base / raw["fixture"]
        try:
            document = parse_document(fixture.read_bytes())
        except OSError as exc:
            raise CorpusError(rid, f"cannot read fixture {fixture}: {exc.strerror}") from None
        except MalformedXml as exc:
            raise CorpusError(rid, f"fixture {fixture.name} is malformed: {exc}") from None
        try:
            bug = CompatBug(
                document=document,
                locator=ElementLocator.from_json(raw["element"]),
                issue_attrs=frozenset(AttrName.parse(a) for a in raw["issue_attrs"]),
                conflicting_levels=tuple(raw["conflicting_levels"]),
                target_level=int(raw.get("target_level", 31)),
                bug_id=rid,
            )
        except BugInvalid as exc:
            raise CorpusError(rid, str(exc)) from None
        difficulty = raw.get("difficulty", "hard")
        if difficulty not in ("easy", "hard"):
            raise CorpusError(rid, f"unknown difficulty {difficulty!r}")
        reference = Patch.from_json(raw["reference_repair"]) if raw.get("reference_repair") else None
        golden = raw.get("golden_transcript")
        record = BugRecord(rid, fixture, bug, difficulty, raw.get("notes", ""), reference,
                           base / golden if golden else None)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CorpusError):
            raise
        raise CorpusError(rid, f"bad record: {exc}") from None

    if check:
        if not _manifests(record.bug, kb):
            raise CorpusError(rid, "bug does not manifest")
        if record.reference_repair is not None:
            try:
                fixed = apply_patch(record.bug.document, record.reference_repair)
            except LocatorUnresolved as exc:
                raise CorpusError(rid, f"reference repair does not apply: {exc}") from None
            verdict = judge_document(fixed, record.bug, kb)
            if verdict.verdict != CORRECT:
                raise CorpusError(rid, f"reference repair is judged {verdict.label}")
    return record


def load_corpus(path: str | Path | None = None, kb: KnowledgeBase | None = None,
                check: bool = True) -> list[BugRecord]:
    """Load a manifest (file, or directory holding ``manifest.json``)."""
    from .kb import default_kb

    kb = kb or default_kb()
    path = Path(path) if path is not None else bundled_corpus_path()
    if path.is_dir():
        path = path / "manifest.json"
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise CorpusError("<manifest>", f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise CorpusError("<manifest>", f"{path} is not valid JSON: {exc}") from None
    if isinstance(data, dict) and data.get("schema", CORPUS_SCHEMA) != CORPUS_SCHEMA:
        raise CorpusError("<manifest>", f"unexpected schema {data.get('schema')!r}")
    raw_records = data.get("records", []) if isinstance(data, dict) else data
    records = [record_from_json(r, path.parent, kb, check) for r in raw_records]
    ids = [r.id for r in records]
    dupes = sorted({i for i in ids if ids.count(i) > 1})
    if dupes:
        raise CorpusError(dupes[0], "duplicate record id")
    return records


# -- judging --------------------------------------------------------------------------

@dataclass(frozen=True)
class Judgment:
    verdict: str  # Correct, Overfitting or Failed
    category: str | None = None  # set only for Failed

    @property
    def label(self) -> str:
        return self.category if self.verdict == FAILED else self.verdict


def judge_document(doc: XmlElement, bug: CompatBug, kb: KnowledgeBase) -> Judgment:
    low, high = bug.conflicting_levels
    at_l, at_h, at_t = (render(doc, lv, kb) for lv in (low, high, bug.target_level))
    original_t = render(bug.document, bug.target_level, kb)

    same_at_target = at_t.as_dict() == original_t.as_dict()
    consistent = at_l.as_dict() == at_h.as_dict()
    kinds = at_l.crash_kinds() | at_h.crash_kinds() | at_t.crash_kinds()

    if same_at_target and consistent and not kinds:
        return Judgment(CORRECT)
    # Build failures come first: nothing runs, so nothing can overfit.
    if "resource" in kinds:
        return Judgment(FAILED, "C-R")
    if "attribute" in kinds:
        return Judgment(FAILED, "C-A")

    F = identify_key_fields(bug, kb).key_fields
    key_fields = F.fields if F is not None else ()
    rc, orig = at_t.as_dict(), original_t.as_dict()
    key_fields_match = all(rc.get(f) == orig.get(f) and (f in rc) == (f in orig) for f in key_fields)
    if consistent and key_fields_match:
        return Judgment(OVERFITTING)

    if kinds:
        return Judgment(FAILED, "I-A")
    if canonical_equal(doc, bug.document):
        return Judgment(FAILED, "N-I")
    idx = bug.locator.resolve_indices(doc)
    element = element_at(doc, idx) if idx is not None else None
    original = bug.element
    if element is not None and element.tag == original.tag:
        present = [a for a in bug.issue_attrs if element.has(a)]
        if len(present) == len(bug.issue_attrs) and all(element.get(a) == original.get(a) for a in present):
            return Judgment(FAILED, "N-I")
        if any(element.get(a) != original.get(a) for a in present):
            return Judgment(FAILED, "U-I")
    return Judgment(FAILED, "R-I")


def judge(outcome: RepairOutcome, bug: CompatBug, kb: KnowledgeBase) -> Judgment:
    return judge_document(outcome.final_document, bug, kb)


# -- evaluation -----------------------------------------------------------------------

def derive_seed(base: int, bug_id: str, run: int) -> int:
    digest = hashlib.sha256(f"{base}:{bug_id}:{run}".encode("utf-8")).hexdigest()
    return int(digest[:16], 16)


@dataclass(frozen=True)
class RunResult:
    bug_id: str
    run: int
    outcome_kind: str
    judgment: Judgment
    rounds_used: int = 0
    backend_calls: int = 0
    score: float | None = None
    error: str | None = None

    def to_json(self) -> dict:
        return {
            "run": self.run,
            "outcome": self.outcome_kind,
            "judgment": self.judgment.verdict,
            "category": self.judgment.category,
            "rounds_used": self.rounds_used,
            "backend_calls": self.backend_calls,
            "score": self.score,
            "error": self.error,
        }


def metrics_from_matrix(matrix: Mapping[str, Sequence[str]]) -> tuple[float, float, float]:
    """(Correct, Overfitting, Correct@k) from bug -> per-run verdict labels.

    Correct and Overfitting average over all runs; Correct@k is the share of
    bugs with at least one Correct run."""
    runs = [v for row in matrix.values() for v in row]
    if not runs:
        return 0.0, 0.0, 0.0
    correct = sum(v == CORRECT for v in runs) / len(runs)
    overfit = sum(v == OVERFITTING for v in runs) / len(runs)
    at_k = sum(any(v == CORRECT for v in row) for row in matrix.values()) / len(matrix)
    return correct, overfit, at_k


@dataclass
class MethodReport:
    method: str
    runs: dict[str, list[RunResult]] = field(default_factory=dict)

    def matrix(self) -> dict[str, list[str]]:
        return {b: [r.judgment.verdict for r in rs] for b, rs in self.runs.items()}

    @property
    def metrics(self) -> tuple[float, float, float]:
        return metrics_from_matrix(self.matrix())

    @property
    def correct(self) -> float:
        return self.metrics[0]

    @property
    def overfitting(self) -> float:
        return self.metrics[1]

    @property
    def correct_at_k(self) -> float:
        return self.metrics[2]

    @property
    def failure_histogram(self) -> dict[str, int]:
        hist = {c: 0 for c in CATEGORIES}
        for rs in self.runs.values():
            for r in rs:
                if r.judgment.verdict == FAILED:
                    hist[r.judgment.category] += 1
        return hist

    @property
    def errors(self) -> list[str]:
        return [f"{r.bug_id}#{r.run}: {r.error}" for rs in self.runs.values() for r in rs if r.error]

    def to_json(self) -> dict:
        c, o, k = self.metrics
        return {
            "method": self.method,
            "correct": round(c, 6),
            "overfitting": round(o, 6),
            "correct_at_k": round(k, 6),
            "failure_histogram": self.failure_histogram,
            "errors": self.errors,
            "bugs": {b: [r.to_json() for r in sorted(rs, key=lambda r: r.run)]
                     for b, rs in sorted(self.runs.items())},
        }


@dataclass
class EvaluationReport:
    methods: list[MethodReport] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def method(self, name: str) -> MethodReport:
        for m in self.methods:
            if m.method == name:
                return m
        raise KeyError(name)

    def to_json(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "version": REPORT_VERSION,
            "config": self.config,
            "methods": [m.to_json() for m in sorted(self.methods, key=lambda m: m.method)],
        }


def _config_snapshot(cfg: RepairConfig) -> dict:
    return cfg.to_json()


def evaluate(records: Sequence[BugRecord], kb: KnowledgeBase, backend: LlmBackend,
             cfg: RepairConfig | None = None, *, method: str = "confrepair",
             sessions_dir: str | Path | None = None, workers: int = 1,
             clock_factory: Callable[[], Callable[[], float]] | None = None,
             sleep: Callable[[float], None] = time.sleep, templates=None) -> EvaluationReport:
    """Repair every bug ``cfg.runs_k`` times and judge each run."""
    cfg = cfg or RepairConfig()
    jobs = [(rec, run) for rec in sorted(records, key=lambda r: r.id) for run in range(cfg.runs_k)]

    def one(job) -> RunResult:
        rec, run = job
        seed = derive_seed(cfg.rng_seed, rec.id, run)
        clock = clock_factory() if clock_factory else time.monotonic
        try:
            outcome, log = repair_bug(rec.bug, kb, backend, cfg, run=run, seed=seed,
                                      templates=templates, clock=clock, sleep=sleep, method=method)
        except Exception as exc:  # aggregated into the report
            return RunResult(rec.id, run, "Error", judge_document(rec.bug.document, rec.bug, kb),
                             error=f"{type(exc).__name__}: {exc}")
        verdict = judge(outcome, rec.bug, kb)
        log.add("judgment", verdict=verdict.verdict, category=verdict.category)
        if sessions_dir is not None:
            persist_session(log, sessions_dir)
        return RunResult(rec.id, run, outcome.kind, verdict, outcome.rounds_used,
                         outcome.backend_calls, outcome.fitness.score if outcome.fitness else None)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, jobs))
    else:
        results = [one(j) for j in jobs]

    report = MethodReport(method)
    for r in results:
        report.runs.setdefault(r.bug_id, []).append(r)
    return EvaluationReport([report], _config_snapshot(cfg))


def report_from_sessions(directory: str | Path) -> EvaluationReport:
    """Rebuild a report from persisted session logs that carry judgments."""
    methods: dict[str, MethodReport] = {}
    config: dict = {}
    for path in sorted(Path(directory).glob("*.json")):
        data = load_session(path)
        recs = data["records"]
        outcome = next((r for r in recs if r["type"] == "outcome"), None)
        verdict = next((r for r in recs if r["type"] == "judgment"), None)
        if outcome is None or verdict is None:
            continue
        config = data.get("config", config)
        fitness = outcome.get("fitness") or {}
        result = RunResult(
            data["bug_id"], data["run"], outcome["kind"],
            Judgment(verdict["verdict"], verdict.get("category")),
            outcome.get("rounds_used", 0),
            sum(1 for r in recs if r["type"] == "exchange"),
            fitness.get("score"),
        )
        m = methods.setdefault(data.get("method", "confrepair"), MethodReport(data.get("method", "confrepair")))
        m.runs.setdefault(result.bug_id, []).append(result)
    for m in methods.values():
        for rs in m.runs.values():
            rs.sort(key=lambda r: r.run)
    return EvaluationReport(sorted(methods.values(), key=lambda m: m.method), config)


# -- emission ----------------------------------------------------------------------------

_HEADER = ("Method", "Correct", "Overfitting", "Correct@k")


def _pct(x: float) -> str:
    return f"{100 * x:.1f}%"


def emit_report(report: EvaluationReport, format: str = "table") -> bytes:
    if format == "machine":
        return (json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n").encode("utf-8")
    if format != "table":
        raise ValueError(f"unknown report format {format!r}")
    rows = [
        (m.method, _pct(m.correct), _pct(m.overfitting), _pct(m.correct_at_k))
        for m in sorted(report.methods, key=lambda m: m.method)
    ]
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(_HEADER)]

    def line(cells):
        first = cells[0].ljust(widths[0])
        rest = [c.rjust(w) for c, w in zip(cells[1:], widths[1:])]
        return " | ".join([first, *rest]).rstrip()

    out = [line(_HEADER), "-+-".join("-" * w for w in widths)]
    out.extend(line(r) for r in rows)
    return ("\n".join(out) + "\n").encode("utf-8")
