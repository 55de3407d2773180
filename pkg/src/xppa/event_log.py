"""Event logs: the process data model, CSV/XES ingestion and summary statistics.

An event log is a collection of traces, one per case. Each trace is the
time-ordered sequence of events recorded for that case; an event carries an
activity label, a timestamp and any number of further attributes.
"""

from __future__ import annotations

import csv
import io
import os
import statistics
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta, timezone
from enum import Enum
from types import MappingProxyType
from typing import IO, Any, Iterable, Mapping, Sequence

import numpy as np
import pandas as pd


class ValueKind(str, Enum):
    LITERAL = "literal"
    NUMERIC = "numeric"
    BOOLEAN = "boolean"
    TIMESTAMP = "timestamp"


class _Missing:
    """Marker for an attribute an event does not assign."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "MISSING"

    def __bool__(self) -> bool:
        return False

    def __reduce__(self):
        return (_Missing, ())


MISSING = _Missing()


class EventLogError(ValueError):
    """Base class for ingestion problems."""


class SchemaError(EventLogError):
    pass


class RowError(EventLogError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class Event:
    activity: str
    timestamp: datetime
    attributes: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not isinstance(self.attributes, MappingProxyType):
            object.__setattr__(self, "attributes", MappingProxyType(dict(self.attributes)))

    def get(self, name: str) -> Any:
        return self.attributes.get(name, MISSING)

    def __eq__(self, other):
        if not isinstance(other, Event):
            return NotImplemented
        return (
            self.activity == other.activity
            and self.timestamp == other.timestamp
            and _attrs_equal(self.attributes, other.attributes)
        )

    def __hash__(self):
        return hash((self.activity, self.timestamp))


def _attrs_equal(a: Mapping[str, Any], b: Mapping[str, Any]) -> bool:
    if a.keys() != b.keys():
        return False
    for k, v in a.items():
        w = b[k]
        if isinstance(v, float) and isinstance(w, float) and np.isnan(v) and np.isnan(w):
            continue
        if v != w:
            return False
    return True


@dataclass(frozen=True)
class Trace:
    case_id: str
    events: tuple[Event, ...]

    def __post_init__(self):
        if not isinstance(self.events, tuple):
            object.__setattr__(self, "events", tuple(self.events))

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    def __getitem__(self, i):
        return self.events[i]

    @property
    def start(self) -> datetime:
        return self.events[0].timestamp

    @property
    def end(self) -> datetime:
        return self.events[-1].timestamp

    @property
    def duration(self) -> timedelta:
        return self.end - self.start


@dataclass(frozen=True)
class EventLog:
    """Immutable collection of traces with a fixed attribute schema.

    ``attribute_schema`` covers the optional attributes only; activity and
    timestamp are required fields of every event. ``activity_key``,
    ``case_key`` and ``time_key`` remember the source column names so that
    explanations and serialization can use the original vocabulary.
    """

    traces: tuple[Trace, ...]
    attribute_schema: Mapping[str, ValueKind]
    activity_key: str = "activity"
    case_key: str = "case_id"
    time_key: str = "timestamp"

    def __post_init__(self):
        if not isinstance(self.traces, tuple):
            object.__setattr__(self, "traces", tuple(self.traces))
        object.__setattr__(self, "attribute_schema", MappingProxyType(dict(self.attribute_schema)))
        index = {}
        for t in self.traces:
            if t.case_id in index:
                raise SchemaError(f"duplicate case id {t.case_id!r}")
            index[t.case_id] = t
        object.__setattr__(self, "_index", index)
        alphabet = frozenset(e.activity for t in self.traces for e in t.events)
        object.__setattr__(self, "_alphabet", alphabet)

    @property
    def activity_alphabet(self) -> frozenset[str]:
        return self._alphabet

    def __len__(self) -> int:
        return len(self.traces)

    def __iter__(self):
        return iter(self.traces)

    def __contains__(self, case_id) -> bool:
        return case_id in self._index

    def trace(self, case_id: str) -> Trace:
        try:
            return self._index[case_id]
        except KeyError:
            raise KeyError(f"case not found: {case_id}") from None

    def with_traces(self, traces: Iterable[Trace]) -> "EventLog":
        return replace(self, traces=tuple(traces))

    def with_schema(self, schema: Mapping[str, ValueKind], traces: Iterable[Trace]) -> "EventLog":
        return replace(self, traces=tuple(traces), attribute_schema=schema)

    @property
    def n_events(self) -> int:
        return sum(len(t) for t in self.traces)


@dataclass(frozen=True)
class LogStats:
    n_traces: int
    n_activities: int
    mean_events_per_trace: float
    median_events_per_trace: float
    mean_duration: timedelta
    std_duration: timedelta

    def as_dict(self) -> dict:
        return {
            "n_traces": self.n_traces,
            "n_activities": self.n_activities,
            "mean_events_per_trace": self.mean_events_per_trace,
            "median_events_per_trace": self.median_events_per_trace,
            "mean_duration_days": self.mean_duration.total_seconds() / 86400.0,
            "std_duration_days": self.std_duration.total_seconds() / 86400.0,
        }


@dataclass(frozen=True)
class CsvConfig:
    """Column mapping for flat event exports.

    ``time_format`` is a strftime pattern; ``None`` means ISO-8601.
    ``kinds`` optionally pins the value kind of attribute columns instead of
    inferring it; cells that do not conform are a schema error.
    """

    case_col: str = "case_id"
    activity_col: str = "activity"
    time_col: str = "timestamp"
    time_format: str | None = None
    kinds: Mapping[str, ValueKind] | None = None


_TRUE = {"true"}
_BOOL = {"true", "false"}


def _read_source(source) -> str:
    if isinstance(source, (bytes, bytearray)):
        return bytes(source).decode("utf-8-sig")
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            return fh.read().decode("utf-8-sig")
    data = source.read()
    if isinstance(data, bytes):
        data = data.decode("utf-8-sig")
    return data


def _infer_kind(cells: pd.Series) -> ValueKind:
    present = cells[cells != ""]
    if present.empty:
        return ValueKind.LITERAL
    if pd.to_numeric(present, errors="coerce").notna().all():
        return ValueKind.NUMERIC
    if present.str.lower().isin(_BOOL).all():
        return ValueKind.BOOLEAN
    return ValueKind.LITERAL


def _convert_column(name: str, cells: pd.Series, kind: ValueKind, time_format: str | None) -> list:
    present = cells != ""
    out: list = [MISSING] * len(cells)
    if kind is ValueKind.NUMERIC:
        nums = pd.to_numeric(cells.where(present), errors="coerce")
        bad = present & nums.isna()
        if bad.any():
            raise SchemaError(f"column {name!r} mixes numeric and non-numeric values")
        for i in np.flatnonzero(present.to_numpy()):
            out[i] = float(cells.iat[i])
    elif kind is ValueKind.BOOLEAN:
        low = cells.str.lower()
        bad = present & ~low.isin(_BOOL)
        if bad.any():
            raise SchemaError(f"column {name!r} mixes boolean and non-boolean values")
        for i in np.flatnonzero(present.to_numpy()):
            out[i] = low.iat[i] in _TRUE
    elif kind is ValueKind.TIMESTAMP:
        ts = _parse_times(cells.where(present), time_format)
        bad = present & ts.isna()
        if bad.any():
            raise SchemaError(f"column {name!r} mixes timestamps and other values")
        for i in np.flatnonzero(present.to_numpy()):
            out[i] = ts.iat[i].to_pydatetime()
    else:
        for i in np.flatnonzero(present.to_numpy()):
            out[i] = cells.iat[i]
    return out


def _parse_times(cells: pd.Series, time_format: str | None) -> pd.Series:
    fmt = time_format or "ISO8601"
    ts = pd.to_datetime(cells, format=fmt, utc=True, errors="coerce")
    return ts.dt.floor("ms")


def parse_csv(source, config: CsvConfig | None = None) -> EventLog:
    """Parse a CSV export into an :class:`EventLog`.

    ``source`` may be raw bytes, a path or a file object. Rows are grouped by
    case id (cases keep their order of first appearance) and each trace is
    sorted by timestamp, ties keeping file order.
    """
    config = config or CsvConfig()
    text = _read_source(source)
    if not text.strip():
        raise SchemaError("empty input: no header row")
    df = pd.read_csv(io.StringIO(text), dtype=str, keep_default_na=False, na_filter=False)
    required = [config.case_col, config.activity_col, config.time_col]
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise SchemaError(f"missing mandatory column(s): {', '.join(missing)}")
    if len(set(df.columns)) != len(df.columns):
        raise SchemaError("duplicate column names in header")

    for col in (config.case_col, config.activity_col):
        empty = np.flatnonzero((df[col] == "").to_numpy())
        if len(empty):
            raise RowError(int(empty[0]) + 2, f"empty {col!r}")
    raw_times = df[config.time_col]
    times = _parse_times(raw_times.where(raw_times != ""), config.time_format)
    bad = np.flatnonzero(times.isna().to_numpy())
    if len(bad):
        i = int(bad[0])
        raise RowError(i + 2, f"unparseable timestamp {raw_times.iat[i]!r}")

    declared = dict(config.kinds or {})
    schema: dict[str, ValueKind] = {}
    columns: dict[str, list] = {}
    for col in df.columns:
        if col in required:
            continue
        kind = ValueKind(declared[col]) if col in declared else _infer_kind(df[col])
        schema[col] = kind
        columns[col] = _convert_column(col, df[col], kind, config.time_format)

    stamps = [t.to_pydatetime() for t in times]
    grouped: dict[str, list[tuple[datetime, int, Event]]] = {}
    cases = df[config.case_col].tolist()
    acts = df[config.activity_col].tolist()
    for i in range(len(df)):
        attrs = {c: columns[c][i] for c in columns if columns[c][i] is not MISSING}
        ev = Event(acts[i], stamps[i], attrs)
        grouped.setdefault(cases[i], []).append((stamps[i], i, ev))

    traces = []
    for case_id, rows in grouped.items():
        rows.sort(key=lambda r: (r[0], r[1]))
        traces.append(Trace(case_id, tuple(r[2] for r in rows)))
    return EventLog(
        tuple(traces),
        schema,
        activity_key=config.activity_col,
        case_key=config.case_col,
        time_key=config.time_col,
    )


def format_timestamp(ts: datetime) -> str:
    ts = ts.astimezone(timezone.utc)
    return ts.strftime("%Y-%m-%dT%H:%M:%S.") + f"{ts.microsecond // 1000:03d}Z"


def _format_value(value: Any, kind: ValueKind) -> str:
    if value is MISSING:
        return ""
    if kind is ValueKind.BOOLEAN:
        return "true" if value else "false"
    if kind is ValueKind.NUMERIC:
        return "" if np.isnan(value) else repr(float(value))
    if kind is ValueKind.TIMESTAMP:
        return format_timestamp(value)
    return str(value)


def write_csv(log: EventLog, dest: str | os.PathLike | IO[str] | None = None) -> str:
    """Serialize ``log`` to its canonical CSV form and return the text.

    Columns are case id, activity, timestamp, then attributes in schema
    order; timestamps are ISO-8601 UTC with millisecond precision.
    """
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    attrs = list(log.attribute_schema)
    writer.writerow([log.case_key, log.activity_key, log.time_key, *attrs])
    for trace in log.traces:
        for ev in trace.events:
            row = [trace.case_id, ev.activity, format_timestamp(ev.timestamp)]
            row += [_format_value(ev.get(a), log.attribute_schema[a]) for a in attrs]
            writer.writerow(row)
    text = buf.getvalue()
    if dest is not None:
        if isinstance(dest, (str, os.PathLike)):
            with open(dest, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        else:
            dest.write(text)
    return text


_XES_KINDS = {
    "string": ValueKind.LITERAL,
    "id": ValueKind.LITERAL,
    "float": ValueKind.NUMERIC,
    "int": ValueKind.NUMERIC,
    "boolean": ValueKind.BOOLEAN,
    "date": ValueKind.TIMESTAMP,
}


def _local(tag: str) -> str:
    return tag.rsplit("}", 1)[-1]


def _xes_value(kind: ValueKind, raw: str):
    if kind is ValueKind.NUMERIC:
        return float(raw)
    if kind is ValueKind.BOOLEAN:
        return raw.strip().lower() == "true"
    if kind is ValueKind.TIMESTAMP:
        ts = pd.Timestamp(raw)
        ts = ts.tz_convert("UTC") if ts.tzinfo else ts.tz_localize("UTC")
        return ts.floor("ms").to_pydatetime()
    return raw


def read_xes(source) -> EventLog:
    """Import the common subset of an XES file.

    ``concept:name`` on traces becomes the case id, on events the activity;
    ``time:timestamp`` becomes the timestamp and ``org:resource`` is renamed
    ``resource``. Trace-level attributes are copied onto every event of the
    trace. Nested/list attributes and extensions are ignored.
    """
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(bytes(source))
    schema: dict[str, ValueKind] = {}
    traces: list[Trace] = []

    def attr_pairs(elem):
        for child in elem:
            tag = _local(child.tag)
            if tag in _XES_KINDS and "key" in child.attrib:
                yield child.attrib["key"], _XES_KINDS[tag], child.attrib.get("value", "")

    def note(key, kind):
        prev = schema.setdefault(key, kind)
        if prev is not kind:
            raise SchemaError(f"attribute {key!r} has mixed kinds {prev.value}/{kind.value}")

    for _, elem in ET.iterparse(source, events=("end",)):
        if _local(elem.tag) != "trace":
            continue
        case_id = None
        trace_attrs = {}
        for key, kind, raw in attr_pairs(elem):
            if key == "concept:name":
                case_id = raw
            else:
                note(key, kind)
                trace_attrs[key] = _xes_value(kind, raw)
        if case_id is None:
            case_id = f"trace_{len(traces)}"
        rows = []
        for pos, ev_elem in enumerate(c for c in elem if _local(c.tag) == "event"):
            activity, ts = None, None
            attrs = dict(trace_attrs)
            for key, kind, raw in attr_pairs(ev_elem):
                if key == "concept:name":
                    activity = raw
                elif key == "time:timestamp":
                    ts = _xes_value(ValueKind.TIMESTAMP, raw)
                else:
                    name = "resource" if key == "org:resource" else key
                    note(name, kind)
                    attrs[name] = _xes_value(kind, raw)
            if activity is None or ts is None:
                raise SchemaError(f"event without concept:name or time:timestamp in trace {case_id!r}")
            rows.append((ts, pos, Event(activity, ts, attrs)))
        elem.clear()
        if rows:
            rows.sort(key=lambda r: (r[0], r[1]))
            traces.append(Trace(case_id, tuple(r[2] for r in rows)))
    return EventLog(tuple(traces), schema, activity_key="concept:name", case_key="case:concept:name",
                    time_key="time:timestamp")


def log_statistics(log: EventLog) -> LogStats:
    """Summary numbers in the style of the usual event-log overview table."""
    if not log.traces:
        return LogStats(0, 0, 0.0, 0.0, timedelta(0), timedelta(0))
    lengths = [len(t) for t in log.traces]
    durations = np.array([t.duration.total_seconds() for t in log.traces])
    return LogStats(
        n_traces=len(log.traces),
        n_activities=len(log.activity_alphabet),
        mean_events_per_trace=float(np.mean(lengths)),
        median_events_per_trace=float(statistics.median(lengths)),
        mean_duration=timedelta(seconds=float(durations.mean())),
        std_duration=timedelta(seconds=float(durations.std())),
    )


def prefixes(trace: Trace) -> list[Trace]:
    """All non-empty prefixes of ``trace``, shortest first."""
    if not trace.events:
        raise ValueError("trace has no events")
    return [Trace(trace.case_id, trace.events[:i]) for i in range(1, len(trace) + 1)]


def sort_by_start(traces: Sequence[Trace]) -> list[Trace]:
    return sorted(traces, key=lambda t: t.start)
