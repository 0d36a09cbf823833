"""Append-only, thread-safe event log used to audit backend usage."""

from __future__ import annotations

import threading
from collections import Counter
from typing import Any


class EventLog:
    def __init__(self) -> None:
        self._events: list[dict[str, Any]] = []
        self._lock = threading.Lock()

    def emit(self, kind: str, **data: Any) -> None:
        with self._lock:
            self._events.append({"kind": kind, **data})

    def extend(self, events: list[dict[str, Any]]) -> None:
        with self._lock:
            self._events.extend(dict(e) for e in events)

    @property
    def events(self) -> list[dict[str, Any]]:
        with self._lock:
            return list(self._events)

    def of_kind(self, kind: str) -> list[dict[str, Any]]:
        return [e for e in self.events if e["kind"] == kind]

    def counts(self) -> dict[str, int]:
        return dict(sorted(Counter(e["kind"] for e in self.events).items()))

    def calls(self, purpose: str | None = None) -> list[dict[str, Any]]:
        calls = self.of_kind("backend_call")
        if purpose is None:
            return calls
        return [c for c in calls if c.get("purpose") == purpose]

    def __len__(self) -> int:
        return len(self._events)
