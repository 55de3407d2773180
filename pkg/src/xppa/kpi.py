"""KPI definitions: the target value of a completed trace after its first i events."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .event_log import MISSING, EventLog, Trace, ValueKind


class KpiKind(str, Enum):
    REMAINING_TIME = "remaining_time"
    ACTIVITY_OCCURRENCE = "activity_occurrence"
    TRACE_ATTRIBUTE = "trace_level_attribute"
    RUNNING_TOTAL = "running_numeric_total"


class LabelingError(ValueError):
    """A trace cannot be labeled under a KPI (it is excluded from datasets)."""


@dataclass(frozen=True)
class KpiSpec:
    kind: KpiKind
    target: str | None = None
    value_kind: str = "numeric"

    def __post_init__(self):
        object.__setattr__(self, "kind", KpiKind(self.kind))
        if self.kind in (KpiKind.ACTIVITY_OCCURRENCE, KpiKind.TRACE_ATTRIBUTE, KpiKind.RUNNING_TOTAL):
            if not self.target:
                raise ValueError(f"{self.kind.value} needs a target")
        expected = {
            KpiKind.REMAINING_TIME: "numeric",
            KpiKind.RUNNING_TOTAL: "numeric",
            KpiKind.ACTIVITY_OCCURRENCE: "boolean",
        }.get(self.kind)
        if expected is not None and self.value_kind != expected:
            raise ValueError(f"{self.kind.value} is always {expected}")
        if self.value_kind not in ("numeric", "boolean"):
            raise ValueError(f"unsupported KPI value kind {self.value_kind!r}")

    @classmethod
    def remaining_time(cls) -> "KpiSpec":
        return cls(KpiKind.REMAINING_TIME)

    @classmethod
    def activity_occurrence(cls, activity: str) -> "KpiSpec":
        return cls(KpiKind.ACTIVITY_OCCURRENCE, activity, "boolean")

    @classmethod
    def trace_attribute(cls, attr: str, value_kind: str = "numeric") -> "KpiSpec":
        return cls(KpiKind.TRACE_ATTRIBUTE, attr, value_kind)

    @classmethod
    def running_total(cls, attr: str) -> "KpiSpec":
        return cls(KpiKind.RUNNING_TOTAL, attr)

    @classmethod
    def for_log(cls, kind: str, log: EventLog, target: str | None = None) -> "KpiSpec":
        """Build a spec, taking the value kind of attribute KPIs from ``log``."""
        kind = KpiKind(kind)
        if kind is KpiKind.TRACE_ATTRIBUTE:
            attr_kind = log.attribute_schema.get(target)
            if attr_kind is None:
                raise ValueError(f"unknown attribute {target!r}")
            if attr_kind not in (ValueKind.NUMERIC, ValueKind.BOOLEAN):
                raise ValueError(f"attribute {target!r} is {attr_kind.value}; KPIs must be numeric or boolean")
            return cls.trace_attribute(target, attr_kind.value)
        if kind is KpiKind.RUNNING_TOTAL:
            if log.attribute_schema.get(target) is not ValueKind.NUMERIC:
                raise ValueError(f"running total needs a numeric attribute, got {target!r}")
        return cls(kind, target, "boolean" if kind is KpiKind.ACTIVITY_OCCURRENCE else "numeric")

    @property
    def is_boolean(self) -> bool:
        return self.value_kind == "boolean"

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "target": self.target, "value_kind": self.value_kind}

    @classmethod
    def from_dict(cls, d: dict) -> "KpiSpec":
        return cls(KpiKind(d["kind"]), d.get("target"), d.get("value_kind", "numeric"))


def _numeric(trace: Trace, idx: int, attr: str) -> float:
    v = trace.events[idx].get(attr)
    if v is MISSING or (isinstance(v, float) and np.isnan(v)):
        raise LabelingError(f"case {trace.case_id!r}: {attr!r} missing on event {idx + 1}")
    return float(v)


def kpi_value(spec: KpiSpec, trace: Trace, i: int) -> float | bool:
    """KPI of the completed ``trace`` after its first ``i`` events (1-based).

    Remaining time is returned in seconds.
    """
    n = len(trace)
    if not 1 <= i <= n:
        raise IndexError(f"prefix length {i} outside 1..{n}")
    if spec.kind is KpiKind.REMAINING_TIME:
        return (trace.events[-1].timestamp - trace.events[i - 1].timestamp).total_seconds()
    if spec.kind is KpiKind.ACTIVITY_OCCURRENCE:
        return i < n and any(e.activity == spec.target for e in trace.events[i:])
    if spec.kind is KpiKind.TRACE_ATTRIBUTE:
        v = trace.events[-1].get(spec.target)
        if v is MISSING:
            raise LabelingError(f"case {trace.case_id!r}: {spec.target!r} missing on last event")
        return bool(v) if spec.is_boolean else float(v)
    return _numeric(trace, n - 1, spec.target) - _numeric(trace, i - 1, spec.target)


def trace_labels(spec: KpiSpec, trace: Trace) -> np.ndarray:
    """KPI values for every prefix length 1..|trace|, as floats (booleans as 0/1)."""
    n = len(trace)
    if spec.kind is KpiKind.REMAINING_TIME:
        end = trace.events[-1].timestamp
        return np.array([(end - e.timestamp).total_seconds() for e in trace.events])
    if spec.kind is KpiKind.ACTIVITY_OCCURRENCE:
        out = np.zeros(n)
        seen = False
        for j in range(n - 1, 0, -1):
            seen = seen or trace.events[j].activity == spec.target
            out[j - 1] = float(seen)
        return out
    return np.array([float(kpi_value(spec, trace, i)) for i in range(1, n + 1)])
