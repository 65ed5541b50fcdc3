"""The end-to-end repair workflow for one bug.

Order of work: find key fields; try every single one-line patch and stop at
a perfect one; otherwise run the Repairer/Checker/Optimizer loop with the
fitness check as the final gate; if that fails too, fall back to sampled
combinations of the single patches (only possible when key fields exist).
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

from .agents import (
    CHECKER,
    OPTIMIZER,
    REPAIRER,
    AgentSession,
    Pcri,
    PromptTemplates,
    UnparsableVerdict,
    Verdict,
    build_initial_repairer_prompt,
    checker_step,
    default_templates,
    optimizer_step,
    repairer_step,
)
from .backends import BackendRequest, BackendUnavailable, LlmBackend
from .conffix import (
    DEFAULT_N_SAMPLES,
    DEFAULT_SEARCH_BUDGET,
    CompatBug,
    FitnessInapplicable,
    FitnessScore,
    KeyFieldSet,
    find_strategy1,
    fitness_score,
    identify_key_fields,
    sample_combined_patches,
    search_single_line_patches,
)
from .kb import KnowledgeBase, render
from .xmlmodel import (
    Patch,
    ReplaceElement,
    XmlElement,
    apply_patch,
    canonical_equal,
    serialize_canonical,
    splice_element,
)

__all__ = [
    "RepairConfig",
    "RepairOutcome",
    "SessionLog",
    "TimeBudgetExceeded",
    "IoError",
    "OUTCOME_KINDS",
    "repair_bug",
    "interaction_loop",
    "fitness_feedback",
    "persist_session",
    "load_session",
]

STRATEGY1 = "Strategy1"
INAPPLICABLE_ACCEPT = "FitnessInapplicableAccept"
LLM_CONVERGED = "LlmConverged"
TWICE_ACCEPT = "TwiceConsecutiveAccept"
COMBINED = "CombinedFallback"
UNREPAIRED = "Unrepaired"
OUTCOME_KINDS = (STRATEGY1, INAPPLICABLE_ACCEPT, LLM_CONVERGED, TWICE_ACCEPT, COMBINED, UNREPAIRED)

SESSION_SCHEMA = "confrepair-session"
SESSION_VERSION = 1


class TimeBudgetExceeded(Exception):
    pass


class IoError(OSError):
    pass


@dataclass(frozen=True)
class RepairConfig:
    loop_budget_n: int = 10
    time_budget_s: float = 120 * 60.0
    runs_k: int = 5
    temperature: float = 0.7
    feedback_mode: str = "coarse"  # coarse or fine
    search_budget: int = DEFAULT_SEARCH_BUDGET
    n_samples: int = DEFAULT_N_SAMPLES
    rng_seed: int = 0
    backend_retries: int = 2
    retry_backoff_s: float = 1.0
    max_consecutive_malformed: int = 3
    max_consecutive_crashes: int = 3

    def __post_init__(self):
        if self.loop_budget_n < 1 or self.runs_k < 1:
            raise ValueError("loop budget and run count must be positive")
        if self.feedback_mode not in ("coarse", "fine"):
            raise ValueError(f"unknown feedback mode {self.feedback_mode!r}")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class RepairOutcome:
    kind: str
    final_document: XmlElement
    patch: Patch
    fitness: FitnessScore | None = None
    rounds_used: int = 0
    wall_time: float = field(default=0.0, compare=False)
    backend_calls: int = 0
    note: str = ""

    @property
    def repaired(self) -> bool:
        return self.kind != UNREPAIRED

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "rounds_used": self.rounds_used,
            "backend_calls": self.backend_calls,
            "note": self.note,
            "fitness": self.fitness.to_json() if self.fitness else None,
            "patch": self.patch.to_json(),
            "document": serialize_canonical(self.final_document).decode("utf-8"),
        }


class SessionLog:
    """Append-only record of one repair run."""

    def __init__(self, bug_id: str, run: int, config: RepairConfig, seed: int,
                 clock: Callable[[], float] = time.monotonic, method: str = "confrepair"):
        self.bug_id = bug_id
        self.run = run
        self.config = config
        self.seed = seed
        self.method = method
        self.records: list[dict] = []
        self._clock = clock
        self._t0 = clock()

    def add(self, type_: str, **data) -> dict:
        rec = {"seq": len(self.records), "t": round(self._clock() - self._t0, 6), "type": type_, **data}
        self.records.append(rec)
        return rec

    def of_type(self, type_: str) -> list[dict]:
        return [r for r in self.records if r["type"] == type_]

    @property
    def backend_calls(self) -> int:
        return len(self.of_type("exchange"))

    def to_json(self) -> dict:
        return {
            "schema": SESSION_SCHEMA,
            "version": SESSION_VERSION,
            "method": self.method,
            "bug_id": self.bug_id,
            "run": self.run,
            "rng_seed": self.seed,
            "config": self.config.to_json(),
            "records": self.records,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"


# -- feedback ---------------------------------------------------------------------

def _show(v) -> str:
    if v is None:
        return "unset"
    if isinstance(v, float):
        return f"{v:g}"
    return str(v)


def fitness_feedback(fs: FitnessScore, mode: str = "coarse", levels: tuple[int, int, int] | None = None,
                     templates: PromptTemplates | None = None) -> str:
    t = templates or default_templates()
    if fs.crashed:
        return t.fill("feedback_crash", reason=fs.crash_reason)
    if mode == "coarse":
        return t.fill("feedback_coarse")
    low, high, target = levels or ("l", "l+1", "l_t")
    rows = ["| element | field | repaired | original | level |", "|---|---|---|---|---|"]
    for (elem, name), (rc, app) in fs.per_field_diffs:
        rows.append(f"| {elem} | {name} | {_show(rc)} | {_show(app)} | {target} |")
    for (elem, name), (lo, hi) in fs.cross_level_diffs:
        rows.append(f"| {elem} | {name} | {_show(lo)} at {low}, {_show(hi)} at {high} | same on both | {low}/{high} |")
    return t.fill("feedback_fine", table="\n".join(rows))


# -- the loop ------------------------------------------------------------------------

@dataclass
class _Ctx:
    bug: CompatBug
    kb: KnowledgeBase
    backend: LlmBackend
    cfg: RepairConfig
    log: SessionLog
    templates: PromptTemplates
    clock: Callable[[], float]
    sleep: Callable[[float], None]
    deadline: float

    def check_time(self):
        if self.clock() >= self.deadline:
            raise TimeBudgetExceeded()


class _LoggingBackend:
    """Adds retries and writes every exchange to the session log."""

    def __init__(self, ctx: _Ctx):
        self.ctx = ctx

    def complete(self, request: BackendRequest) -> str:
        ctx = self.ctx
        attempts = ctx.cfg.backend_retries + 1
        for attempt in range(attempts):
            try:
                reply = ctx.backend.complete(request)
            except BackendUnavailable as exc:
                ctx.log.add("backend_error", agent=request.agent, round=request.round,
                            attempt=attempt + 1, detail=exc.detail)
                if attempt + 1 == attempts or not exc.retryable:
                    raise
                ctx.sleep(ctx.cfg.retry_backoff_s * (2 ** attempt))
                continue
            ctx.log.add("exchange", agent=request.agent, round=request.round,
                        prompt=request.prompt, response=reply)
            return reply
        raise AssertionError("unreachable")


@dataclass(frozen=True)
class LoopResult:
    kind: str | None
    element: XmlElement | None
    document: XmlElement | None
    fitness: FitnessScore | None
    rounds: int
    exit_reason: str


def _crash_check(doc: XmlElement, bug: CompatBug, kb: KnowledgeBase) -> str | None:
    reasons = []
    for lv in bug.levels:
        for c in render(doc, lv, kb).crashes:
            if c.detail not in reasons:
                reasons.append(c.detail)
    return "; ".join(reasons) or None


def interaction_loop(bug: CompatBug, F: KeyFieldSet | None, pcri: Pcri, backend: LlmBackend,
                     cfg: RepairConfig, kb: KnowledgeBase, log: SessionLog | None = None,
                     templates: PromptTemplates | None = None,
                     clock: Callable[[], float] = time.monotonic,
                     sleep: Callable[[float], None] = time.sleep,
                     deadline: float | None = None, run: int = 0) -> LoopResult:
    """Run up to ``cfg.loop_budget_n`` rounds; return the accepted repair, if any."""
    t = templates or default_templates()
    log = log or SessionLog(bug.bug_id, run, cfg, cfg.rng_seed, clock)
    ctx = _Ctx(bug, kb, backend, cfg, log, t, clock, sleep,
               deadline if deadline is not None else clock() + cfg.time_budget_s)
    wired = _LoggingBackend(ctx)
    sessions = {a: AgentSession(a, cfg.temperature, bug_id=bug.bug_id, run=run)
                for a in (REPAIRER, CHECKER, OPTIMIZER)}

    prompt = build_initial_repairer_prompt(bug, pcri, t)
    previous: XmlElement | None = None  # last proposal that reached the fitness check
    malformed = crashes = 0
    rounds = 0

    def done(kind, element, doc, fs, why):
        log.add("loop_exit", rounds=rounds, accepted=kind, reason=why)
        return LoopResult(kind, element, doc, fs, rounds, why)

    while rounds < cfg.loop_budget_n:
        ctx.check_time()
        rounds += 1
        proposal = repairer_step(sessions[REPAIRER], prompt, wired, rounds)
        element = proposal.extracted_element
        log.add("proposal", round=rounds, problem=proposal.problem,
                element=serialize_canonical(element, include_opaque=False).decode("utf-8") if element else None)
        if element is None:
            malformed += 1
            if malformed >= cfg.max_consecutive_malformed:
                return done(None, None, None, None, "repeated malformed responses")
            prompt = t.fill("format_error")
            continue
        malformed = 0
        doc = splice_element(bug.document, bug.locator, element)

        ctx.check_time()
        try:
            verdict = checker_step(sessions[CHECKER], bug, proposal, wired, kb, rounds, t)
        except UnparsableVerdict as exc:
            verdict = Verdict(False, exc.text.strip() or "unparsable verdict", CHECKER, "unparsed")
        log.add("verdict", agent=CHECKER, round=rounds, passed=verdict.passed,
                source=verdict.source, explanation=verdict.explanation)
        if not verdict.passed:
            prompt = verdict.explanation
            continue

        ctx.check_time()
        verdict = optimizer_step(sessions[OPTIMIZER], bug, proposal, wired, kb, rounds, t)
        log.add("verdict", agent=OPTIMIZER, round=rounds, passed=verdict.passed,
                source=verdict.source, explanation=verdict.explanation)
        if not verdict.passed:
            prompt = verdict.explanation
            continue

        # Reached the fitness gate.
        try:
            fs = fitness_score(doc, bug, F, kb)
        except FitnessInapplicable as exc:
            reason = _crash_check(doc, bug, kb)
            log.add("fitness", round=rounds, inapplicable=exc.reason, crash=reason)
            if reason is None:
                return done(INAPPLICABLE_ACCEPT, element, doc, None, exc.reason)
            crashes += 1
            if crashes >= cfg.max_consecutive_crashes:
                return done(None, None, None, None, "repeated crashing repairs")
            prompt = t.fill("feedback_crash", reason=reason)
            previous = element
            continue

        log.add("fitness", round=rounds, **fs.to_json())
        if fs.crashed:
            crashes += 1
            if crashes >= cfg.max_consecutive_crashes:
                return done(None, None, None, None, "repeated crashing repairs")
        else:
            crashes = 0
            if fs.accepted:
                return done(LLM_CONVERGED, element, doc, fs, "fitness accepted")
            if previous is not None and canonical_equal(previous, element):
                return done(TWICE_ACCEPT, element, doc, fs, "same repair twice in a row")
        previous = element
        prompt = fitness_feedback(fs, cfg.feedback_mode, bug.levels, t)

    return done(None, None, None, None, "loop budget exhausted")


# -- the workflow ------------------------------------------------------------------

def repair_bug(bug: CompatBug, kb: KnowledgeBase, backend: LlmBackend, cfg: RepairConfig | None = None,
               *, run: int = 0, seed: int | None = None, templates: PromptTemplates | None = None,
               clock: Callable[[], float] = time.monotonic, sleep: Callable[[float], None] = time.sleep,
               method: str = "confrepair") -> tuple[RepairOutcome, SessionLog]:
    cfg = cfg or RepairConfig()
    seed = cfg.rng_seed if seed is None else seed
    t = templates or default_templates()
    start = clock()
    deadline = start + cfg.time_budget_s
    log = SessionLog(bug.bug_id, run, cfg, seed, clock, method)

    def finish(kind, doc, patch, fs=None, rounds=0, note=""):
        outcome = RepairOutcome(kind, doc, patch, fs, rounds, clock() - start, log.backend_calls, note)
        log.add("outcome", kind=kind, rounds_used=rounds, note=note,
                fitness=fs.to_json() if fs else None, patch=patch.to_json(),
                document=serialize_canonical(doc, include_opaque=False).decode("utf-8"))
        return outcome, log

    def trace(patch, fs, error):
        log.add("fitness", patch=patch.to_json(), **(fs.to_json() if fs else {"error": error}))

    kf = identify_key_fields(bug, kb)
    F = kf.key_fields
    log.add("key_fields", fields=[list(f) for f in F.fields] if F else None,
            candidates=[str(c) for c in kf.candidates])

    patches = []
    if F is not None:
        patches = search_single_line_patches(bug, F, kf.candidates, kb, cfg.search_budget, trace)
        best = find_strategy1(patches)
        if best is not None:
            return finish(STRATEGY1, apply_patch(bug.document, best.patch), best.patch, best.fitness,
                          note=best.describe())
        pcri = Pcri.from_patches(patches, kf.candidates)
    else:
        pcri = Pcri.from_candidates(kf.candidates)

    rounds = 0
    note = ""
    try:
        if clock() >= deadline:
            raise TimeBudgetExceeded()
        result = interaction_loop(bug, F, pcri, backend, cfg, kb, log, t, clock, sleep, deadline, run)
        rounds = result.rounds
        if result.kind is not None:
            patch = Patch((ReplaceElement(bug.locator, result.element),))
            return finish(result.kind, result.document, patch, result.fitness, rounds, result.exit_reason)
        note = result.exit_reason
    except TimeBudgetExceeded:
        rounds = max((r.get("round", 0) for r in log.of_type("proposal")), default=0)
        log.add("time_budget", exceeded=True)
        note = "time budget exhausted"
    except BackendUnavailable as exc:
        rounds = max((r.get("round", 0) for r in log.of_type("proposal")), default=0)
        note = f"backend unavailable: {exc.detail}"

    if F is not None and patches:
        combined = sample_combined_patches(patches, bug, F, kb, cfg.n_samples, seed, trace)
        return finish(COMBINED, apply_patch(bug.document, combined.patch), combined.patch,
                      combined.fitness, rounds, note)
    return finish(UNREPAIRED, bug.document, Patch(), None, rounds, note)


def persist_session(log: SessionLog, directory: str | Path) -> Path:
    directory = Path(directory)
    path = directory / f"{log.bug_id or 'bug'}__run{log.run}.json"
    try:
        directory.mkdir(parents=True, exist_ok=True)
        path.write_text(log.dumps(), encoding="utf-8")
    except OSError as exc:
        raise IoError(exc.errno, f"cannot write session log {path}: {exc.strerror}") from None
    return path


def load_session(path: str | Path) -> dict:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if data.get("schema") != SESSION_SCHEMA:
        raise ValueError(f"{path}: not a session log")
    return data
