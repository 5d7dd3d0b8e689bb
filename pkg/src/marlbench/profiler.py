"""Hierarchical phase profiler for training loops.

Phases form a fixed two-level tree. Scopes are context managers built
around a monotonic clock; the guard objects are cached per phase so the
open/close hot path stays well under a microsecond.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from enum import IntEnum
from time import perf_counter_ns

logger = logging.getLogger(__name__)


class Phase(IntEnum):
    ACTION_SELECTION = 0
    ENV_STEP = 1
    EXPERIENCE_COLLECTION = 2
    UPDATE_ALL_TRAINERS = 3
    MINI_BATCH_SAMPLING = 4
    TARGET_Q_CALC = 5
    Q_LOSS = 6
    P_LOSS = 7
    OTHER = 8

    @property
    def label(self) -> str:
        return _LABELS[self]


_LABELS = {
    Phase.ACTION_SELECTION: "ActionSelection",
    Phase.ENV_STEP: "EnvStep",
    Phase.EXPERIENCE_COLLECTION: "ExperienceCollection",
    Phase.UPDATE_ALL_TRAINERS: "UpdateAllTrainers",
    Phase.MINI_BATCH_SAMPLING: "MiniBatchSampling",
    Phase.TARGET_Q_CALC: "TargetQCalc",
    Phase.Q_LOSS: "QLoss",
    Phase.P_LOSS: "PLoss",
    Phase.OTHER: "Other",
}

# parent phase index, or None for top-level phases
_PARENT: list[Phase | None] = [None] * len(Phase)
for _child in (Phase.MINI_BATCH_SAMPLING, Phase.TARGET_Q_CALC, Phase.Q_LOSS, Phase.P_LOSS):
    _PARENT[_child] = Phase.UPDATE_ALL_TRAINERS

_TOP_LEVEL = tuple(p for p in Phase if _PARENT[p] is None)
_CHILDREN = tuple(p for p in Phase if _PARENT[p] is not None)

UNATTRIBUTED = "unattributed"


class ProfilerError(RuntimeError):
    """Raised on illegal scope nesting when the report is strict."""


class EmptyReportError(ValueError):
    """Raised when a breakdown is requested on a report with no recorded time."""


class _Scope:
    __slots__ = ("_r", "_i", "_parent", "_t0")

    def __init__(self, report: "ProfileReport", phase: Phase):
        self._r = report
        self._i = int(phase)
        self._parent = _PARENT[phase]

    def __enter__(self) -> "_Scope":
        r = self._r
        stack = r._stack
        top = stack[-1] if stack else None
        if top != self._parent or r._open[self._i]:
            r._violation(self._i, top)
        r._open[self._i] = True
        stack.append(self._i)
        self._t0 = perf_counter_ns()
        return self

    def __exit__(self, *exc) -> bool:
        dt = perf_counter_ns() - self._t0
        r = self._r
        r.ns[self._i] += dt
        r.counts[self._i] += 1
        r._open[self._i] = False
        r._stack.pop()
        return False


@dataclass
class ProfileReport:
    """Accumulated per-phase nanoseconds and scope counts for one run.

    ``strict`` controls nesting validation: violations raise when True and
    are logged and counted when False.
    """

    meta: dict = field(default_factory=dict)
    strict: bool = True

    def __post_init__(self):
        n = len(Phase)
        self.ns: list[int] = [0] * n
        self.counts: list[int] = [0] * n
        self.violations: int = 0
        self._open: list[bool] = [False] * n
        self._stack: list[int] = []
        self._scopes: dict[int, _Scope] = {}
        self._t_start: int | None = None
        self._total_ns: int | None = None

    def start(self) -> None:
        self._t_start = perf_counter_ns()

    def stop(self) -> None:
        if self._t_start is None:
            raise ProfilerError("stop() called before start()")
        self._total_ns = perf_counter_ns() - self._t_start

    @property
    def total_ns(self) -> int:
        """Wall time between start() and stop(), or the top-level sum if never framed."""
        if self._total_ns is not None:
            return self._total_ns
        return sum(self.ns[p] for p in _TOP_LEVEL)

    def phase_ns(self, phase: Phase) -> int:
        return self.ns[int(phase)]

    def phase_count(self, phase: Phase) -> int:
        return self.counts[int(phase)]

    def _violation(self, idx: int, top: int | None) -> None:
        name = _LABELS[Phase(idx)]
        inside = _LABELS[Phase(top)] if top is not None else "top level"
        msg = f"illegal profiler nesting: {name} opened inside {inside}"
        if self.strict:
            raise ProfilerError(msg)
        self.violations += 1
        logger.warning(msg)


def phase_scope(report: ProfileReport, phase: Phase) -> _Scope:
    """Return the report's reusable timing guard for one phase."""
    idx = int(phase)
    scope = report._scopes.get(idx)
    if scope is None:
        scope = _Scope(report, Phase(idx))
        report._scopes[idx] = scope
    return scope


@dataclass
class BreakdownRow:
    name: str
    parent: str | None
    ns: int
    count: int
    percent: float


def breakdown(report: ProfileReport) -> list[BreakdownRow]:
    """Percent-of-parent rows, one per phase plus residual rows per level.

    Top-level phases are measured against total wall time, children of
    UpdateAllTrainers against their parent. Each level carries an
    ``unattributed`` residual row so the percentages sum to 100.
    """
    total = report.total_ns
    if total <= 0:
        raise EmptyReportError("profile report holds no recorded time")
    rows: list[BreakdownRow] = []
    top_sum = 0
    for p in _TOP_LEVEL:
        ns = report.ns[p]
        top_sum += ns
        rows.append(BreakdownRow(p.label, None, ns, report.counts[p], 100.0 * ns / total))
    rows.append(
        BreakdownRow(UNATTRIBUTED, None, max(total - top_sum, 0), 0,
                     100.0 * max(total - top_sum, 0) / total)
    )
    parent_ns = report.ns[Phase.UPDATE_ALL_TRAINERS]
    parent_label = Phase.UPDATE_ALL_TRAINERS.label
    child_sum = 0
    for p in _CHILDREN:
        ns = report.ns[p]
        child_sum += ns
        pct = 100.0 * ns / parent_ns if parent_ns > 0 else 0.0
        rows.append(BreakdownRow(p.label, parent_label, ns, report.counts[p], pct))
    resid = max(parent_ns - child_sum, 0)
    rows.append(
        BreakdownRow(UNATTRIBUTED, parent_label, resid, 0,
                     100.0 * resid / parent_ns if parent_ns > 0 else 0.0)
    )
    return rows


def growth_rate(base: ProfileReport, other: ProfileReport) -> dict[str, float | None]:
    """Per-phase time ratios other/base, plus a "total" entry.

    A phase with zero time in the base report maps to None rather than a
    division error.
    """
    out: dict[str, float | None] = {}
    for p in Phase:
        a, b = base.ns[p], other.ns[p]
        out[p.label] = (b / a) if a > 0 else None
    ta, tb = base.total_ns, other.total_ns
    out["total"] = (tb / ta) if ta > 0 else None
    return out


def report_to_dict(report: ProfileReport) -> dict:
    total = report.total_ns
    phases = []
    for p in Phase:
        parent = _PARENT[p]
        if parent is None:
            denom = total
        else:
            denom = report.ns[parent]
        pct = 100.0 * report.ns[p] / denom if denom > 0 else 0.0
        phases.append(
            {
                "name": p.label,
                "parent": parent.label if parent is not None else None,
                "ns": report.ns[p],
                "count": report.counts[p],
                "pct_of_parent": pct,
            }
        )
    return {
        "meta": dict(report.meta),
        "total_ns": total,
        "violations": report.violations,
        "phases": phases,
    }


def report_to_json(report: ProfileReport) -> str:
    return json.dumps(report_to_dict(report), indent=2, sort_keys=False)


def report_from_json(text: str) -> dict:
    """Parse a serialized report back to its dict form, checking the schema."""
    data = json.loads(text)
    for key in ("meta", "total_ns", "phases"):
        if key not in data:
            raise ValueError(f"profile json missing key {key!r}")
    return data


def report_to_csv(report: ProfileReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["name", "parent", "ns", "count", "pct_of_parent"])
    for row in report_to_dict(report)["phases"]:
        writer.writerow([row["name"], row["parent"] or "", row["ns"], row["count"],
                         repr(row["pct_of_parent"])])
    return buf.getvalue()
