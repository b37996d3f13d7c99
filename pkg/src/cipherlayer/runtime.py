"""Operation counters, level ledger and budget checks."""

from __future__ import annotations

import contextlib
import json
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Iterator

COUNTER_FIELDS = ("add", "sub", "mult", "pmult", "rot", "refresh", "encode", "encrypt")


@dataclass
class CounterSnapshot:
    """Immutable-by-convention view of the counters at a point in time."""

    add: int = 0
    sub: int = 0
    mult: int = 0
    pmult: int = 0
    rot: int = 0
    refresh: int = 0
    encode: int = 0
    encrypt: int = 0
    by_tag: dict = field(default_factory=dict)

    def as_dict(self) -> dict[str, int]:
        return {k: getattr(self, k) for k in COUNTER_FIELDS}

    def __sub__(self, other: "CounterSnapshot") -> "CounterSnapshot":
        return diff(other, self)

    def __add__(self, other: "CounterSnapshot") -> "CounterSnapshot":
        tags = {t: dict(v) for t, v in self.by_tag.items()}
        for t, v in other.by_tag.items():
            row = tags.setdefault(t, {})
            for k, n in v.items():
                row[k] = row.get(k, 0) + n
        return CounterSnapshot(**{k: getattr(self, k) + getattr(other, k) for k in COUNTER_FIELDS},
                               by_tag=tags)

    def __eq__(self, other) -> bool:
        if not isinstance(other, CounterSnapshot):
            return NotImplemented
        return self.as_dict() == other.as_dict() and self.by_tag == other.by_tag

    @property
    def nonscalar(self) -> int:
        return self.mult


class OpCounters:
    """Thread-safe running tallies, with a per-tag breakdown.

    ``enabled=False`` turns increments into no-ops; numerical results do
    not depend on it.
    """

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self._lock = threading.Lock()
        self._totals = dict.fromkeys(COUNTER_FIELDS, 0)
        self._tags: dict[str, dict[str, int]] = {}

    def bump(self, op: str, n: int = 1, tag: str | None = None) -> None:
        if op not in self._totals:
            raise KeyError(f"unknown counter {op!r}")
        if not self.enabled or n == 0:
            return
        with self._lock:
            self._totals[op] += n
            if tag is not None:
                row = self._tags.setdefault(tag, {})
                row[op] = row.get(op, 0) + n

    def snapshot(self) -> CounterSnapshot:
        with self._lock:
            return CounterSnapshot(**self._totals, by_tag={t: dict(v) for t, v in self._tags.items()})

    def reset(self) -> None:
        with self._lock:
            self._totals = dict.fromkeys(COUNTER_FIELDS, 0)
            self._tags = {}

    def merge(self, other: "OpCounters") -> None:
        snap = other.snapshot()
        for k in COUNTER_FIELDS:
            self.bump(k, getattr(snap, k))
        with self._lock:
            for t, v in snap.by_tag.items():
                row = self._tags.setdefault(t, {})
                for k, n in v.items():
                    row[k] = row.get(k, 0) + n

    def __getattr__(self, name: str) -> int:
        if name in COUNTER_FIELDS:
            return self._totals[name]
        raise AttributeError(name)


def snapshot(counters: OpCounters) -> CounterSnapshot:
    return counters.snapshot()


def diff(before: CounterSnapshot, after: CounterSnapshot) -> CounterSnapshot:
    tags: dict[str, dict[str, int]] = {}
    for t, v in after.by_tag.items():
        prev = before.by_tag.get(t, {})
        row = {k: n - prev.get(k, 0) for k, n in v.items() if n - prev.get(k, 0)}
        if row:
            tags[t] = row
    return CounterSnapshot(**{k: getattr(after, k) - getattr(before, k) for k in COUNTER_FIELDS}, by_tag=tags)


def depth_of(x: Any) -> int:
    """Multiplicative depth of a ciphertext, a packed matrix, or a sequence of either."""
    if hasattr(x, "depth") and not hasattr(x, "cols"):
        return int(x.depth)
    if hasattr(x, "cols"):
        return max(int(c.depth) for c in x.cols)
    return max(depth_of(c) for c in x)


def level_of(x: Any) -> int:
    if hasattr(x, "level") and not hasattr(x, "cols"):
        return int(x.level)
    if hasattr(x, "cols"):
        return min(int(c.level) for c in x.cols)
    return min(level_of(c) for c in x)


@dataclass
class StageRecord:
    label: str
    levels: int
    level_in: int
    level_out: int
    counters: CounterSnapshot
    wall: float

    def as_record(self) -> dict:
        return {"label": self.label, "levels": self.levels, "level_in": self.level_in,
                "level_out": self.level_out, **self.counters.as_dict(), "wall_s": round(self.wall, 6)}


@dataclass
class BudgetReport:
    stage: str
    expected: int
    measured: int
    ledger: list

    @property
    def passed(self) -> bool:
        return self.measured == self.expected

    def __bool__(self) -> bool:
        return self.passed

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        lines = [f"{status} {self.stage}: expected {self.expected} levels, measured {self.measured}"]
        if not self.passed:
            for rec in self.ledger:
                lines.append(f"  {rec.label}: levels={rec.levels} {rec.counters.as_dict()}")
        return "\n".join(lines)


class UnknownStageError(KeyError):
    pass


class _OpenStage:
    def __init__(self, label: str, source: Any):
        self.label = label
        self.source = source
        self.result: Any = None


class LevelTracker:
    """Per-pipeline ledger of consumed levels and counter deltas per stage.

    A stage's consumed levels are depth(result) - depth(source), which equals
    the number of mult and pmult operations on the longest path through it.
    """

    def __init__(self, counters: OpCounters | None = None):
        self.counters = counters
        self.records: list[StageRecord] = []
        self.history: list[tuple[str, int, int]] = []

    def record(self, label: str, source: Any, result: Any, counters: CounterSnapshot | None = None,
               wall: float = 0.0) -> StageRecord:
        rec = StageRecord(label=label, levels=depth_of(result) - depth_of(source),
                          level_in=level_of(source), level_out=level_of(result),
                          counters=counters if counters is not None else CounterSnapshot(), wall=wall)
        self.records.append(rec)
        self.history.append((label, rec.level_in, rec.level_out))
        return rec

    @contextlib.contextmanager
    def stage(self, label: str, source: Any) -> Iterator[_OpenStage]:
        st = _OpenStage(label, source)
        before = self.counters.snapshot() if self.counters is not None else None
        t0 = time.perf_counter()
        yield st
        wall = time.perf_counter() - t0
        if st.result is None:
            raise RuntimeError(f"stage {label!r} finished without a result")
        delta = diff(before, self.counters.snapshot()) if before is not None else None
        self.record(label, st.source, st.result, delta, wall)

    def stages(self, label: str) -> list[StageRecord]:
        return [r for r in self.records if r.label == label]

    def merge(self, other: "LevelTracker") -> None:
        self.records.extend(other.records)
        self.history.extend(other.history)

    def assert_budget(self, stage: str, expected_levels: int) -> BudgetReport:
        recs = self.stages(stage)
        if not recs:
            raise UnknownStageError(f"no stage recorded under {stage!r}; known: {sorted({r.label for r in self.records})}")
        measured = recs[-1].levels
        sub = [r for r in self.records if r.label.startswith(stage + ".")] or recs
        return BudgetReport(stage=stage, expected=expected_levels, measured=measured, ledger=sub)

    def table(self) -> str:
        head = f"{'stage':<28}{'lvls':>5}{'in':>5}{'out':>5}{'add':>7}{'sub':>7}{'mult':>7}{'pmult':>7}{'rot':>7}{'refr':>6}{'wall_s':>9}"
        lines = [head, "-" * len(head)]
        for r in self.records:
            c = r.counters
            lines.append(f"{r.label:<28}{r.levels:>5}{r.level_in:>5}{r.level_out:>5}{c.add:>7}{c.sub:>7}"
                         f"{c.mult:>7}{c.pmult:>7}{c.rot:>7}{c.refresh:>6}{r.wall:>9.3f}")
        return "\n".join(lines)

    def records_jsonl(self) -> str:
        return "\n".join(json.dumps(r.as_record()) for r in self.records)
