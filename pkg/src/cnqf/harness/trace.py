"""Trace records, the line format, and milestone matching."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from cnqf.errors import AssertionFailure, ParseError
from cnqf.mms import fmt_number

HEADER = "# cnqf-trace v1 seed={seed}"


@dataclass(frozen=True)
class TraceRecord:
    t: int
    seq: int
    entity: str
    kind: str
    detail: Mapping[str, Any]


_ESCAPES = {"%": "%25", ";": "%3B", "=": "%3D", "\t": "%09", "\n": "%0A", ",": "%2C"}


def _escape(text: str) -> str:
    return "".join(_ESCAPES.get(c, c) for c in text)


def format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return fmt_number(value)
    if isinstance(value, (list, tuple)):
        return ",".join(format_value(v) for v in value)
    return _escape(str(value))


def format_record(rec: TraceRecord) -> str:
    detail = ";".join(f"{k}={format_value(rec.detail[k])}" for k in sorted(rec.detail))
    return f"t={rec.t}\tseq={rec.seq}\tentity={rec.entity}\tkind={rec.kind}\tdetail={detail}"


def format_trace(records: Iterable[TraceRecord], seed: int) -> str:
    lines = [HEADER.format(seed=seed)]
    lines += [format_record(r) for r in records]
    return "\n".join(lines) + "\n"


def write_trace(path: str | Path, records: Iterable[TraceRecord], seed: int) -> None:
    Path(path).write_text(format_trace(records, seed), encoding="utf-8", newline="\n")


_LINE = re.compile(r"t=(\d+)\tseq=(\d+)\tentity=([^\t]*)\tkind=([^\t]*)\tdetail=(.*)")


def parse_trace(text: str) -> tuple[int, list[TraceRecord]]:
    """Inverse of ``format_trace``; detail values come back as strings."""
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# cnqf-trace v1 seed="):
        raise ParseError("missing trace header", 1)
    seed = int(lines[0].rsplit("=", 1)[1])
    records = []
    for n, line in enumerate(lines[1:], start=2):
        m = _LINE.fullmatch(line)
        if not m:
            raise ParseError("malformed trace record", n)
        detail = {}
        if m.group(5):
            for part in m.group(5).split(";"):
                k, _, v = part.partition("=")
                detail[k] = v
        records.append(TraceRecord(int(m.group(1)), int(m.group(2)), m.group(3), m.group(4), detail))
    return seed, records


# -- milestones -------------------------------------------------------------

_MILESTONE = re.compile(r"(?:(?P<entity>[\w.\-]+):)?(?P<kind>[A-Z][A-Z0-9_]*)(?:\((?P<arg>[^)]*)\))?")


@dataclass(frozen=True)
class Milestone:
    """``KIND``, ``entity:KIND``, ``KIND(value)`` or ``KIND(key=value)``."""

    kind: str
    entity: str | None = None
    key: str | None = None
    value: str | None = None

    @classmethod
    def parse(cls, token: str) -> "Milestone":
        m = _MILESTONE.fullmatch(token.strip())
        if not m:
            raise ParseError(f"bad milestone {token!r}")
        key = value = None
        if m.group("arg"):
            key, sep, value = m.group("arg").partition("=")
            if not sep:
                key, value = None, key
        return cls(m.group("kind"), m.group("entity"), key, value)

    def matches(self, rec: TraceRecord) -> bool:
        if rec.kind != self.kind:
            return False
        if self.entity is not None and rec.entity != self.entity:
            return False
        if self.value is None:
            return True
        if self.key is not None:
            return self.key in rec.detail and format_value(rec.detail[self.key]) == self.value
        return any(format_value(v) == self.value for v in rec.detail.values())

    def __str__(self) -> str:
        out = f"{self.entity}:{self.kind}" if self.entity else self.kind
        if self.value is not None:
            out += f"({self.key}={self.value})" if self.key else f"({self.value})"
        return out


def _as_milestones(milestones: Sequence[str | Milestone]) -> list[Milestone]:
    return [m if isinstance(m, Milestone) else Milestone.parse(m) for m in milestones]


def count_embeddings(records: Sequence[TraceRecord], milestones: Sequence[str | Milestone]) -> int:
    """Number of distinct ways the milestones occur as a subsequence of the trace."""
    ms = _as_milestones(milestones)
    ways = [1] + [0] * len(ms)
    for rec in records:
        for j in range(len(ms), 0, -1):
            if ms[j - 1].matches(rec):
                ways[j] += ways[j - 1]
    return ways[-1]


def first_unmet(records: Sequence[TraceRecord], milestones: Sequence[str | Milestone]) -> int | None:
    """Index of the first milestone a greedy left-to-right match cannot find."""
    ms = _as_milestones(milestones)
    j = 0
    for rec in records:
        if j < len(ms) and ms[j].matches(rec):
            j += 1
    return None if j == len(ms) else j


def assert_milestones(records: Sequence[TraceRecord], milestones: Sequence[str | Milestone]) -> None:
    ms = _as_milestones(milestones)
    missing = first_unmet(records, ms)
    if missing is not None:
        raise AssertionFailure(f"milestone {missing + 1} ({ms[missing]}) not reached")
    n = count_embeddings(records, ms)
    if n != 1:
        raise AssertionFailure(f"milestone sequence matched {n} times, expected exactly once")
