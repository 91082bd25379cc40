"""Per-session call accounting shared by the model gateway and the executor."""

from __future__ import annotations

import hashlib
import json
import threading
import time
from typing import Any, Callable


def digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


class LogicalClock:
    """Monotone tick counter; keeps transcripts byte-reproducible."""

    def __init__(self) -> None:
        self._t = 0
        self._lock = threading.Lock()

    def __call__(self) -> float:
        with self._lock:
            self._t += 1
            return float(self._t)


def wall_clock() -> float:
    return time.perf_counter() * 1000.0


class Transcript:
    """Ordered log of model and database calls for one session.

    Each step records the role, digests of what was sent and received,
    timing from the session clock, and the running call counters.
    """

    def __init__(self, clock: Callable[[], float] | None = None) -> None:
        self.clock = clock or LogicalClock()
        self.steps: list[dict[str, Any]] = []
        self.llm_calls = 0
        self.db_calls = 0
        self._lock = threading.Lock()

    def _append(self, role: str, started: float, **fields: Any) -> dict[str, Any]:
        elapsed = self.clock() - started
        with self._lock:
            if role == "llm":
                self.llm_calls += 1
            elif role == "db":
                self.db_calls += 1
            step = {
                "step": len(self.steps) + 1,
                "role": role,
                **fields,
                "timing": round(elapsed, 3),
                "llm_calls": self.llm_calls,
                "db_calls": self.db_calls,
            }
            self.steps.append(step)
        return step

    def llm(self, kind: str, prompt: str, response: str | None, started: float, error: str | None = None) -> None:
        self._append(
            "llm",
            started,
            kind=kind,
            prompt_digest=digest(prompt),
            response_digest=digest(response) if response is not None else None,
            error=error,
        )

    def db(self, sql: str, started: float, status: str, rows: int | None = None) -> None:
        self._append("db", started, prompt_digest=digest(sql), status=status, rows=rows)

    def note(self, event: str, **fields: Any) -> None:
        self._append("loop", self.clock(), event=event, **fields)

    def count(self, role: str) -> int:
        return sum(1 for s in self.steps if s["role"] == role)

    def to_json(self) -> str:
        doc = {"llm_calls": self.llm_calls, "db_calls": self.db_calls, "steps": self.steps}
        return json.dumps(doc, indent=1, sort_keys=True, ensure_ascii=False)
