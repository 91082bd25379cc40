"""Uniform access to language-model backends.

Three backends share one interface (``complete(request) -> str``):

* :class:`ScriptedBackend` replays canned responses from a script file,
* :class:`FunctionBackend` wraps a Python callable (deterministic policies),
* :class:`LiveBackend` calls an OpenAI-compatible chat-completion endpoint.

The live backend refuses to start unless ``SQLSCOUT_LIVE=1`` is set, which
keeps it out of unit-test code paths. :class:`Gateway` adds retries and
per-session call accounting on top of any backend.

Script file format: a JSON list of records ``{"kind": ..., "response": ...}``;
a record ``{"kind": ..., "error": "transient"}`` injects a retriable fault.
A top-level object ``{"strict": true, "records": [...]}`` replays the
records in exact order and fails on a kind mismatch; otherwise each request
takes the next unused record of its own kind.
"""

from __future__ import annotations

import enum
import json
import logging
import os
import threading
from collections import defaultdict, deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Protocol

from .actions import parse_action_response  # noqa: F401  (re-exported)
from .prompts import render_messages
from .tracking import Transcript

logger = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 0.7
LIVE_FLAG = "SQLSCOUT_LIVE"


class RequestKind(str, enum.Enum):
    ACTION_SELECTION = "ActionSelection"
    SQL_COMPLETION = "SqlCompletion"
    NL_DESCRIPTION = "NlDescription"
    KEYWORD_EXTRACTION = "KeywordExtraction"
    CONTEXT_EXPANSION = "ContextExpansion"
    FIDELITY_JUDGMENT = "FidelityJudgment"


REQUIRED_PARTS: dict[RequestKind, tuple[str, ...]] = {
    RequestKind.ACTION_SELECTION: ("candidates", "schema_context"),
    RequestKind.SQL_COMPLETION: ("stage", "schema_context"),
    RequestKind.NL_DESCRIPTION: ("fragment", "sql"),
    RequestKind.KEYWORD_EXTRACTION: ("question",),
    RequestKind.CONTEXT_EXPANSION: ("question", "components"),
    RequestKind.FIDELITY_JUDGMENT: ("question", "result_preview"),
}


class BackendError(Exception):
    pass


class TransientBackendError(BackendError):
    """Retriable failure (network hiccup, rate limit, injected fault)."""


class BackendUnavailable(BackendError):
    """The backend kept failing after the retry budget was spent."""


class ScriptExhausted(BackendError):
    pass


class ScriptKindMismatch(BackendError):
    pass


@dataclass(frozen=True)
class PolicyRequest:
    kind: RequestKind
    payload: dict[str, Any]
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", RequestKind(self.kind))
        missing = [p for p in REQUIRED_PARTS[self.kind] if p not in self.payload]
        if missing:
            raise ValueError(f"{self.kind.value} request missing payload parts {missing}")

    def messages(self) -> list[dict[str, str]]:
        return render_messages(self.kind.value, self.payload)

    def prompt_text(self) -> str:
        return json.dumps(self.messages(), ensure_ascii=False)


@dataclass
class BackendConfig:
    endpoint: str
    model: str
    api_key_env: str = "MODEL_API_KEY"
    timeout: float = 60.0
    retry_budget: int = 2

    def __post_init__(self) -> None:
        if self.retry_budget < 0:
            raise ValueError("retry budget must be >= 0")

    @classmethod
    def from_env(cls) -> "BackendConfig":
        endpoint = os.environ.get("MODEL_ENDPOINT")
        if not endpoint:
            raise BackendError("MODEL_ENDPOINT is not set")
        return cls(endpoint=endpoint, model=os.environ.get("MODEL_NAME", "gpt-4o"))


class Backend(Protocol):
    def complete(self, request: PolicyRequest) -> str: ...


@dataclass
class ScriptRecord:
    kind: RequestKind
    response: str | None = None
    error: str | None = None


def load_script(path: str | Path) -> "ScriptedBackend":
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    strict = False
    if isinstance(doc, dict):
        strict = bool(doc.get("strict", False))
        doc = doc["records"]
    records = []
    for i, rec in enumerate(doc):
        if "kind" not in rec or ("response" not in rec and "error" not in rec):
            raise ValueError(f"{path}: record {i} needs 'kind' and 'response' or 'error'")
        response = rec.get("response")
        if response is not None and not isinstance(response, str):
            response = json.dumps(response)
        records.append(ScriptRecord(RequestKind(rec["kind"]), response, rec.get("error")))
    return ScriptedBackend(records, strict=strict)


class ScriptedBackend:
    """Replays canned responses; access to the cursor is serialized."""

    def __init__(self, records: list[ScriptRecord] | list[tuple[str, str]], strict: bool = False) -> None:
        self.records = [
            r if isinstance(r, ScriptRecord) else ScriptRecord(RequestKind(r[0]), r[1]) for r in records
        ]
        self.strict = strict
        self._lock = threading.Lock()
        self._cursor = 0
        self._queues: dict[RequestKind, deque[ScriptRecord]] = defaultdict(deque)
        for r in self.records:
            self._queues[r.kind].append(r)

    def complete(self, request: PolicyRequest) -> str:
        with self._lock:
            if self.strict:
                if self._cursor >= len(self.records):
                    raise ScriptExhausted(f"script exhausted at {request.kind.value} request")
                rec = self.records[self._cursor]
                if rec.kind is not request.kind:
                    raise ScriptKindMismatch(
                        f"script record {self._cursor} is {rec.kind.value}, request is {request.kind.value}"
                    )
                self._cursor += 1
            else:
                queue = self._queues[request.kind]
                if not queue:
                    raise ScriptExhausted(f"script exhausted at {request.kind.value} request")
                rec = queue.popleft()
        if rec.error is not None:
            raise TransientBackendError(f"injected fault: {rec.error}")
        return rec.response or ""

    def remaining(self, kind: RequestKind | None = None) -> int:
        if self.strict:
            return len(self.records) - self._cursor
        if kind is None:
            return sum(len(q) for q in self._queues.values())
        return len(self._queues[kind])


class FunctionBackend:
    def __init__(self, fn: Callable[[PolicyRequest], str]) -> None:
        self.fn = fn

    def complete(self, request: PolicyRequest) -> str:
        return self.fn(request)


def live_enabled() -> bool:
    return os.environ.get(LIVE_FLAG) == "1"


class LiveBackend:
    """OpenAI-compatible ``/chat/completions`` client."""

    def __init__(self, config: BackendConfig) -> None:
        if not live_enabled():
            raise BackendError(f"live backend disabled; set {LIVE_FLAG}=1 to enable")
        import httpx

        self.config = config
        self._client = httpx.Client(timeout=config.timeout)

    def complete(self, request: PolicyRequest) -> str:
        import httpx

        key = os.environ.get(self.config.api_key_env, "")
        url = self.config.endpoint.rstrip("/")
        if not url.endswith("/chat/completions"):
            url += "/chat/completions"
        body = {"model": self.config.model, "messages": request.messages(), "temperature": request.temperature}
        try:
            resp = self._client.post(url, json=body, headers={"Authorization": f"Bearer {key}"})
        except httpx.HTTPError as exc:
            raise TransientBackendError(str(exc)) from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientBackendError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise BackendError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, ValueError) as exc:
            raise BackendError(f"malformed completion response: {exc}") from exc


@dataclass
class Gateway:
    """Retries and counts calls; one transcript per session.

    Every attempt, including failed ones, counts as one model call.
    """

    backend: Backend
    retry_budget: int = 0
    transcript: Transcript = field(default_factory=Transcript)
    temperature: float = DEFAULT_TEMPERATURE

    def with_transcript(self, transcript: Transcript) -> "Gateway":
        return Gateway(self.backend, self.retry_budget, transcript, self.temperature)

    @property
    def llm_call_count(self) -> int:
        return self.transcript.llm_calls

    def request(self, kind: RequestKind | str, **payload: Any) -> str:
        return self.complete(PolicyRequest(RequestKind(kind), payload, self.temperature))

    def complete(self, request: PolicyRequest) -> str:
        prompt = request.prompt_text()
        attempts = 0
        while True:
            started = self.transcript.clock()
            try:
                response = self.backend.complete(request)
            except TransientBackendError as exc:
                self.transcript.llm(request.kind.value, prompt, None, started, error=str(exc))
                attempts += 1
                if attempts > self.retry_budget:
                    raise BackendUnavailable(f"{request.kind.value}: {exc}") from exc
                logger.warning("transient backend fault on %s, retrying: %s", request.kind.value, exc)
                continue
            except BackendError as exc:
                self.transcript.llm(request.kind.value, prompt, None, started, error=str(exc))
                raise
            self.transcript.llm(request.kind.value, prompt, response, started)
            return response


def complete(request: PolicyRequest, backend: Backend | Gateway) -> str:
    if isinstance(backend, Gateway):
        return backend.complete(request)
    return Gateway(backend).complete(request)
