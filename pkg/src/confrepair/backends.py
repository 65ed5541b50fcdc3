"""Chat-completion backends: a scripted replayer for tests and a live HTTP client.

Transcript file format (JSON)::

    {"schema": "confrepair-transcript",
     "default": "optional reply for any unmatched request",
     "responses": [
        {"bug": "imageview-foreground-22-23", "run": 0,
         "agent": "Repairer", "round": 1, "response": "..."},
        {"agent": "Checker", "prompt_sha256": "ab12...", "response": "[PASS]"}
     ]}

``bug``, ``run`` and ``round`` are optional; a lookup tries the most specific
match first: (bug, run, agent, round), then (bug, agent, round), then
(agent, round).  An entry carrying ``prompt_sha256`` only matches a request
whose last user message hashes to that value.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import httpx

__all__ = [
    "ChatMessage",
    "BackendRequest",
    "LlmBackend",
    "BackendUnavailable",
    "ScriptedBackend",
    "LiveBackend",
    "API_KEY_ENV",
    "sha256_text",
]

log = logging.getLogger(__name__)

API_KEY_ENV = "COMPAT_REPAIR_API_KEY"
TRANSCRIPT_SCHEMA = "confrepair-transcript"
ROLES = ("system", "user", "assistant")


class BackendUnavailable(RuntimeError):
    """``retryable`` is False when asking again cannot help (a missing
    scripted response, a missing API key)."""

    def __init__(self, detail: str, retryable: bool = True):
        super().__init__(detail)
        self.detail = detail
        self.retryable = retryable


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown chat role {self.role!r}")
        if not self.content:
            raise ValueError("chat message content is empty")

    def to_json(self) -> dict:
        return {"role": self.role, "content": self.content}


@dataclass(frozen=True)
class BackendRequest:
    messages: tuple[ChatMessage, ...]
    temperature: float
    agent: str
    round: int
    bug_id: str = ""
    run: int = 0

    @property
    def prompt(self) -> str:
        for m in reversed(self.messages):
            if m.role == "user":
                return m.content
        return ""


class LlmBackend(Protocol):
    def complete(self, request: BackendRequest) -> str: ...


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass
class _Entry:
    response: str
    agent: str
    bug: str | None = None
    run: int | None = None
    round: int | None = None
    prompt_sha256: str | None = None


class ScriptedBackend:
    """Replays canned responses; deterministic and thread-safe."""

    def __init__(self, entries: Sequence[_Entry] = (), default: str | None = None):
        self.entries = list(entries)
        self.default = default
        self.calls: list[BackendRequest] = []
        self._lock = threading.Lock()

    @classmethod
    def from_data(cls, data: dict) -> "ScriptedBackend":
        if data.get("schema", TRANSCRIPT_SCHEMA) != TRANSCRIPT_SCHEMA:
            raise ValueError(f"not a transcript: schema {data.get('schema')!r}")
        entries = []
        for raw in data.get("responses", ()):
            entries.append(_Entry(
                response=raw["response"],
                agent=raw["agent"],
                bug=raw.get("bug"),
                run=raw.get("run"),
                round=raw.get("round"),
                prompt_sha256=raw.get("prompt_sha256"),
            ))
        return cls(entries, data.get("default"))

    @classmethod
    def from_path(cls, path: str | Path) -> "ScriptedBackend":
        """Load one transcript or session log file, or every ``*.json`` file in a directory."""
        path = Path(path)
        files = sorted(path.glob("*.json")) if path.is_dir() else [path]
        merged = cls()
        for f in files:
            try:
                data = json.loads(f.read_text(encoding="utf-8"))
                is_log = isinstance(data, dict) and "records" in data and "bug_id" in data
                one = cls.from_session_log(data) if is_log else cls.from_data(data)
            except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
                raise ValueError(f"{f}: {exc}") from None
            merged.entries.extend(one.entries)
            if one.default is not None:
                merged.default = one.default
        return merged

    @classmethod
    def from_session_log(cls, log_data: dict | str | Path) -> "ScriptedBackend":
        """Rebuild the backend that produced a persisted session."""
        if not isinstance(log_data, dict):
            log_data = json.loads(Path(log_data).read_text(encoding="utf-8"))
        bug, run = log_data.get("bug_id"), log_data.get("run")
        entries = [
            _Entry(response=r["response"], agent=r["agent"], bug=bug, run=run, round=r["round"])
            for r in log_data.get("records", ())
            if r.get("type") == "exchange" and r.get("response") is not None
        ]
        return cls(entries)

    def _match(self, req: BackendRequest) -> str | None:
        digest = sha256_text(req.prompt)

        def ok(e: _Entry, need_bug: bool, need_run: bool) -> bool:
            if e.agent != req.agent:
                return False
            if e.prompt_sha256 is not None and e.prompt_sha256 != digest:
                return False
            if e.round is not None and e.round != req.round:
                return False
            if e.round is None and e.prompt_sha256 is None:
                return False
            if need_bug != (e.bug is not None) or (need_bug and e.bug != req.bug_id):
                return False
            if need_run != (e.run is not None) or (need_run and e.run != req.run):
                return False
            return True

        for need_bug, need_run in ((True, True), (True, False), (False, False)):
            for e in self.entries:
                if ok(e, need_bug, need_run):
                    return e.response
        return self.default

    def complete(self, request: BackendRequest) -> str:
        with self._lock:
            self.calls.append(request)
        reply = self._match(request)
        if reply is None:
            raise BackendUnavailable(
                f"no scripted response for {request.bug_id or '*'} "
                f"{request.agent} round {request.round}", retryable=False)
        return reply


class LiveBackend:
    """OpenAI-style chat-completion client.

    The API key is read from ``COMPAT_REPAIR_API_KEY`` and nowhere else.  It is
    kept out of ``repr`` and never logged.
    """

    def __init__(self, endpoint: str, model: str, timeout: float = 60.0,
                 client: httpx.Client | None = None):
        key = os.environ.get(API_KEY_ENV)
        if not key:
            raise BackendUnavailable(f"environment variable {API_KEY_ENV} is not set", retryable=False)
        self.endpoint = endpoint
        self.model = model
        self.timeout = timeout
        self._key = key
        self._client = client or httpx.Client(timeout=timeout)

    def __repr__(self) -> str:
        return f"LiveBackend(endpoint={self.endpoint!r}, model={self.model!r})"

    def complete(self, request: BackendRequest) -> str:
        body = {
            "model": self.model,
            "temperature": request.temperature,
            "messages": [m.to_json() for m in request.messages],
        }
        log.debug("chat request: agent=%s round=%s messages=%d",
                  request.agent, request.round, len(request.messages))
        try:
            resp = self._client.post(
                self.endpoint,
                json=body,
                headers={"Authorization": f"Bearer {self._key}"},
                timeout=self.timeout,
            )
        except httpx.HTTPError as exc:
            raise BackendUnavailable(f"request failed: {type(exc).__name__}") from None
        if resp.status_code != 200:
            raise BackendUnavailable(f"HTTP {resp.status_code} from chat endpoint")
        try:
            content = resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError):
            raise BackendUnavailable("malformed chat-completion response") from None
        if not isinstance(content, str) or not content:
            raise BackendUnavailable("empty chat-completion response")
        return content
