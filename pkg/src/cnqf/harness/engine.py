"""Deterministic discrete-event engine.

Events are totally ordered by (time, seq); seq is the insertion counter, so
events scheduled for the same instant run in FIFO order.
"""

from __future__ import annotations

import heapq
import itertools
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Callable

from cnqf.errors import EngineIdle, UnknownEntity
from cnqf.harness.trace import TraceRecord

DEFAULT_LATENCY_MS = 1


@dataclass(order=True, frozen=True)
class Event:
    time: int
    seq: int
    target: str = field(compare=False)
    kind: str = field(compare=False)
    payload: dict = field(compare=False, default_factory=dict)
    sender: str = field(compare=False, default="")


class Entity:
    """Base for harness entities; ``on_<kind>`` methods handle messages."""

    def __init__(self, entity_id: str):
        self.id = entity_id
        self.engine: Engine | None = None

    def handle(self, event: Event) -> None:
        handler = getattr(self, "on_" + event.kind.lower(), None)
        if handler is None:
            self.record("FAULT", error=f"no handler for {event.kind}", sender=event.sender)
            return
        handler(event)

    # helpers
    @property
    def now(self) -> int:
        return self.engine.now

    def record(self, kind: str, /, **detail: Any) -> TraceRecord:
        return self.engine.record(self.id, kind, **detail)

    def send(self, target: str, kind: str, /, **payload: Any) -> Event:
        return self.engine.send(self.id, target, kind, payload)

    def timer(self, at: int, kind: str, /, **payload: Any) -> Event:
        return self.engine.post(self.id, kind, payload, at=at, sender=self.id)


class Engine:
    def __init__(self, latency_ms: int = DEFAULT_LATENCY_MS, horizon_ms: int | None = None):
        self.now = 0
        self.latency_ms = latency_ms
        self.horizon_ms = horizon_ms
        self.entities: dict[str, Entity] = {}
        self.trace: list[TraceRecord] = []
        self.faults: list[Exception] = []
        self.observers: list[Callable[["Engine", Event], None]] = []
        self._queue: list[Event] = []
        self._seq = itertools.count()
        self._ids: dict[str, int] = defaultdict(int)

    def add(self, entity: Entity) -> Entity:
        if entity.id in self.entities:
            raise ValueError(f"duplicate entity {entity.id}")
        entity.engine = self
        self.entities[entity.id] = entity
        return entity

    def new_id(self, prefix: str) -> str:
        self._ids[prefix] += 1
        return f"{prefix}{self._ids[prefix]}"

    def schedule(self, event: Event) -> Event:
        if event.time < self.now:
            raise ValueError(f"cannot schedule in the past ({event.time} < {self.now})")
        heapq.heappush(self._queue, event)
        return event

    def post(self, target: str, kind: str, payload: dict | None = None, at: int | None = None, sender: str = "") -> Event:
        at = self.now if at is None else at
        return self.schedule(Event(at, next(self._seq), target, kind, dict(payload or {}), sender))

    def send(self, sender: str, target: str, kind: str, payload: dict, delay: int | None = None) -> Event:
        delay = self.latency_ms if delay is None else delay
        return self.post(target, kind, payload, at=self.now + delay, sender=sender)

    def record(self, entity: str, kind: str, /, **detail: Any) -> TraceRecord:
        rec = TraceRecord(self.now, len(self.trace), entity, kind, detail)
        self.trace.append(rec)
        return rec

    def pending(self) -> int:
        return len(self._queue)

    def peek_time(self) -> int | None:
        return self._queue[0].time if self._queue else None

    def step(self) -> Event:
        """Process the least pending event; raises EngineIdle on an empty queue."""
        if not self._queue:
            raise EngineIdle("no pending events")
        event = heapq.heappop(self._queue)
        self.now = event.time
        entity = self.entities.get(event.target)
        if entity is None:
            fault = UnknownEntity(f"event {event.kind} targets unknown entity {event.target}")
            self.faults.append(fault)
            self.record("engine", "FAULT", error="unknown entity", target=event.target, event=event.kind)
        else:
            entity.handle(event)
        for observer in self.observers:
            observer(self, event)
        return event

    def run(self, until: int | None = None) -> None:
        """Run to queue exhaustion, or until the next event lies beyond ``until``."""
        until = self.horizon_ms if until is None else until
        while self._queue:
            if until is not None and self._queue[0].time > until:
                break
            self.step()
