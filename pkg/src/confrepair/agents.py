"""The three agent roles, with their prompt building and reply parsing.

Only the Repairer produces XML.  The Checker and Optimizer answer with a
verdict whose first token is ``[PASS]`` or ``[FAIL]``.  Each role keeps its
own :class:`AgentSession`; nothing is copied between sessions.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from string import Template
from typing import Sequence

from .backends import BackendRequest, ChatMessage, LlmBackend
from .conffix import CandidatePatch, CompatBug
from .kb import KnowledgeBase
from .xmlmodel import AttrName, MalformedXml, XmlElement, parse_document, serialize_canonical

__all__ = [
    "REPAIRER",
    "CHECKER",
    "OPTIMIZER",
    "PROMPT_TOKEN_BUDGET",
    "PromptTooLong",
    "UnparsableVerdict",
    "PromptTemplates",
    "Pcri",
    "AgentSession",
    "RepairProposal",
    "Verdict",
    "estimate_tokens",
    "extract_element",
    "parse_verdict",
    "bug_section",
    "build_initial_repairer_prompt",
    "repairer_step",
    "checker_step",
    "optimizer_step",
    "unrelated_additions",
]

REPAIRER, CHECKER, OPTIMIZER = "Repairer", "Checker", "Optimizer"
PROMPT_TOKEN_BUDGET = 1000

TEMPLATE_NAMES = (
    "background", "rules", "task", "pcri", "pcri_empty", "response",
    "checker_system", "checker_task", "optimizer_system", "optimizer_task",
    "format_error", "feedback_coarse", "feedback_fine", "feedback_crash",
)


class PromptTooLong(ValueError):
    def __init__(self, tokens: int, budget: int):
        super().__init__(f"prompt needs {tokens} tokens, budget is {budget}")
        self.tokens = tokens
        self.budget = budget


class UnparsableVerdict(ValueError):
    def __init__(self, text: str):
        super().__init__("verdict has no leading [PASS] or [FAIL] marker")
        self.text = text


_TOKEN = re.compile(r"\w+|[^\w\s]")


def estimate_tokens(text: str) -> int:
    """Rough token count: word and punctuation pieces, but never fewer than
    one token per four characters."""
    return max(len(_TOKEN.findall(text)), math.ceil(len(text) / 4))


@dataclass(frozen=True)
class PromptTemplates:
    texts: dict

    @classmethod
    def load(cls, directory: str | Path | None = None) -> "PromptTemplates":
        """Bundled templates, with any same-named files in ``directory`` on top."""
        base = resources.files("confrepair") / "data" / "prompts"
        texts = {n: (base / f"{n}.txt").read_text(encoding="utf-8").rstrip("\n") for n in TEMPLATE_NAMES}
        if directory is not None:
            for n in TEMPLATE_NAMES:
                p = Path(directory) / f"{n}.txt"
                if p.is_file():
                    texts[n] = p.read_text(encoding="utf-8").rstrip("\n")
        return cls(texts)

    def fill(self, name: str, **values) -> str:
        return Template(self.texts[name]).safe_substitute(**values)


_DEFAULT_TEMPLATES: PromptTemplates | None = None


def default_templates() -> PromptTemplates:
    global _DEFAULT_TEMPLATES
    if _DEFAULT_TEMPLATES is None:
        _DEFAULT_TEMPLATES = PromptTemplates.load()
    return _DEFAULT_TEMPLATES


@dataclass(frozen=True)
class Pcri:
    """Candidate repair information handed to the Repairer."""

    candidates: tuple[AttrName, ...] = ()
    scored: tuple[tuple[str, float], ...] = ()  # (patch description, score)

    @classmethod
    def from_candidates(cls, candidates: Sequence[AttrName]) -> "Pcri":
        return cls(candidates=tuple(candidates))

    @classmethod
    def from_patches(cls, patches: Sequence[CandidatePatch], candidates: Sequence[AttrName] = ()) -> "Pcri":
        return cls(tuple(candidates), tuple((p.describe(), p.fitness.score) for p in patches))

    @property
    def empty(self) -> bool:
        return not self.candidates and not self.scored

    def lines(self) -> list[str]:
        out = []
        if self.candidates:
            out.append("Candidate replacement attributes: " + ", ".join(str(c) for c in self.candidates))
        if self.scored:
            out.append("Single-line patches already tried (score 1 would be a full fix):")
            out.extend(f"- {d} (score {s:.3f})" for d, s in self.scored)
        return out

    def trimmed(self, keep_scored: int) -> "Pcri":
        return Pcri(self.candidates, self.scored[:keep_scored])


def bug_section(bug: CompatBug, templates: PromptTemplates | None = None) -> str:
    t = templates or default_templates()
    element = serialize_canonical(bug.element, include_opaque=False).decode("utf-8").rstrip("\n")
    low, high = bug.conflicting_levels
    return t.fill("task", element=element, attrs=", ".join(str(a) for a in bug.sorted_attrs),
                  low=low, high=high, target=bug.target_level)


def _pcri_section(pcri: Pcri, t: PromptTemplates) -> str:
    if pcri.empty:
        return t.fill("pcri_empty")
    return t.fill("pcri", pcri="\n".join(pcri.lines()))


def build_initial_repairer_prompt(bug: CompatBug, pcri: Pcri | None = None,
                                  templates: PromptTemplates | None = None,
                                  budget: int = PROMPT_TOKEN_BUDGET) -> str:
    t = templates or default_templates()
    pcri = pcri or Pcri()
    task = bug_section(bug, t)
    if estimate_tokens(task) > budget:
        raise PromptTooLong(estimate_tokens(task), budget)

    def assemble(p: Pcri) -> str:
        return "\n\n".join([
            t.fill("background"),
            "Repair rules:\n" + t.fill("rules"),
            task,
            _pcri_section(p, t),
            t.fill("response"),
        ])

    # Drop scored patches from the tail, then the candidate list, until it fits.
    for keep in range(len(pcri.scored), -1, -1):
        prompt = assemble(pcri.trimmed(keep))
        if estimate_tokens(prompt) <= budget:
            return prompt
    prompt = assemble(Pcri())
    if estimate_tokens(prompt) <= budget:
        return prompt
    raise PromptTooLong(estimate_tokens(prompt), budget)


# -- sessions ------------------------------------------------------------------------

@dataclass
class AgentSession:
    agent: str
    temperature: float = 0.7
    transcript: list[ChatMessage] = field(default_factory=list)
    bug_id: str = ""
    run: int = 0

    def ask(self, prompt: str, backend: LlmBackend, round: int) -> str:
        self.transcript.append(ChatMessage("user", prompt))
        request = BackendRequest(tuple(self.transcript), self.temperature, self.agent,
                                 round, self.bug_id, self.run)
        try:
            reply = backend.complete(request)
        except Exception:
            self.transcript.pop()
            raise
        self.transcript.append(ChatMessage("assistant", reply))
        return reply

    def set_system(self, content: str) -> None:
        if self.transcript and self.transcript[0].role == "system":
            return
        self.transcript.insert(0, ChatMessage("system", content))


@dataclass(frozen=True)
class RepairProposal:
    raw_response: str
    extracted_element: XmlElement | None
    explanation: str
    problem: str | None = None  # why no element could be extracted


@dataclass(frozen=True)
class Verdict:
    passed: bool
    explanation: str
    kind: str  # Checker or Optimizer
    source: str = "backend"  # backend, screen or unparsed


_FENCE = re.compile(r"```[ \t]*([A-Za-z0-9_-]*)[ \t]*\n(.*?)```", re.DOTALL)


def extract_element(text: str) -> tuple[XmlElement | None, str, str | None]:
    """(element, explanation, problem).  Exactly one fenced block must be
    present and hold well-formed XML."""
    fences = _FENCE.findall(text)
    if not fences:
        return None, text.strip(), "no fenced code block"
    if len(fences) > 1:
        return None, text.strip(), "more than one fenced code block"
    body = fences[0][1]
    explanation = _FENCE.sub("", text).strip()
    try:
        return parse_document(body.strip()), explanation, None
    except MalformedXml as exc:
        return None, text.strip(), f"malformed XML: {exc}"


_VERDICT = re.compile(r"^\s*\[(PASS|FAIL)\]\s*(.*)\Z", re.DOTALL | re.IGNORECASE)


def parse_verdict(text: str, kind: str) -> Verdict:
    m = _VERDICT.match(text)
    if m is None:
        raise UnparsableVerdict(text)
    passed = m.group(1).upper() == "PASS"
    explanation = m.group(2).strip()
    if not passed and not explanation:
        explanation = f"The {kind.lower()} rejected the repair without giving a reason."
    return Verdict(passed, explanation, kind)


def repairer_step(session: AgentSession, prompt: str, backend: LlmBackend,
                  round: int = 1) -> RepairProposal:
    reply = session.ask(prompt, backend, round)
    element, explanation, problem = extract_element(reply)
    return RepairProposal(reply, element, explanation, problem)


def checker_step(session: AgentSession, bug: CompatBug, proposal: RepairProposal,
                 backend: LlmBackend, kb: KnowledgeBase, round: int = 1,
                 templates: PromptTemplates | None = None) -> Verdict:
    """Static screening first; only a clean proposal is sent to the backend.
    Raises :class:`UnparsableVerdict` when the reply has no marker."""
    if proposal.extracted_element is None:
        raise ValueError("checker needs a proposal with an element")
    issues = kb.screen(proposal.extracted_element)
    if issues:
        return Verdict(False, "The repair does not build: " + "; ".join(i.detail for i in issues) + ".",
                       CHECKER, "screen")
    t = templates or default_templates()
    session.set_system(t.fill("background") + "\n\n" + t.fill("checker_system"))
    reply = session.ask(t.fill("checker_task", bug=bug_section(bug, t), response=proposal.raw_response),
                        backend, round)
    return parse_verdict(reply, CHECKER)


def unrelated_additions(bug: CompatBug, element: XmlElement, kb: KnowledgeBase) -> list[AttrName]:
    """Attributes in the proposal that neither the original element nor the
    candidate list accounts for."""
    original = {n for el in bug.element.iter() for n, _ in el.attributes}
    allowed = set(bug.issue_attrs)
    for a in bug.issue_attrs:
        allowed.update(kb.candidates(a))
    found = []
    for el in element.iter():
        for n, _ in el.attributes:
            if n.is_namespace_decl or n in original or n in allowed or n in found:
                continue
            found.append(n)
    return sorted(found, key=AttrName.sort_key)


def optimizer_step(session: AgentSession, bug: CompatBug, proposal: RepairProposal,
                   backend: LlmBackend, kb: KnowledgeBase | None = None, round: int = 1,
                   templates: PromptTemplates | None = None) -> Verdict:
    """An unparsable reply counts as a pass: minimality review is best effort."""
    if proposal.extracted_element is None:
        raise ValueError("optimizer needs a proposal with an element")
    t = templates or default_templates()
    extra = unrelated_additions(bug, proposal.extracted_element, kb) if kb is not None else []
    screen = ""
    if extra:
        screen = "\nThese attributes were added and are not obviously related to the problem: " + \
            ", ".join(str(a) for a in extra)
    session.set_system(t.fill("background") + "\n\n" + t.fill("optimizer_system"))
    reply = session.ask(t.fill("optimizer_task", bug=bug_section(bug, t), response=proposal.raw_response,
                               rules=t.fill("rules"), screen=screen).rstrip("\n"),
                        backend, round)
    try:
        return parse_verdict(reply, OPTIMIZER)
    except UnparsableVerdict:
        return Verdict(True, reply.strip(), OPTIMIZER, "unparsed")
