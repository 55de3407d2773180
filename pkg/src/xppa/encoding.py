"""Trace-prefix encoders.

Every prefix of every trace becomes one fixed-width row. An event is encoded
as one column per attribute; categorical attributes keep integer category
codes (the tree learner splits on them natively), numeric attributes keep
their value. A prefix is then encoded either from its last event only, from
its last k+1 events concatenated, or from per-activity counts plus its last
event.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .event_log import MISSING, Event, EventLog, Trace, ValueKind
from .kpi import KpiSpec, LabelingError, trace_labels

MISSING_CODE = 0
UNKNOWN_CODE = 1
FIRST_CODE = 2

LAST_EVENT = "last_event"
HISTORY = "history"
AGGREGATE = "aggregate_count"
PRESENCE = "presence"

TIME_FROM_START = "time_from_start"
WEEKDAY = "weekday"
WEEKDAYS = ("Monday", "Tuesday", "Wednesday", "Thursday", "Friday", "Saturday", "Sunday")


class EncodingError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureDescriptor:
    """Ties one dataset column back to the attribute it was built from.

    ``offset`` counts events back from the last one (0 = last event).
    ``categories[c - FIRST_CODE]`` is the value behind category code ``c``.
    """

    source_attribute: str
    position: str
    value_kind: str
    offset: int = 0
    activity: str | None = None
    categories: tuple[str, ...] = ()
    engineered: bool = False

    @property
    def name(self) -> str:
        if self.position == AGGREGATE:
            return f"count({self.activity})"
        if self.position == PRESENCE:
            return f"event[-{self.offset}]"
        if self.offset:
            return f"{self.source_attribute}[-{self.offset}]"
        return self.source_attribute

    @property
    def is_categorical(self) -> bool:
        return self.value_kind == "categorical"

    def decode(self, code: float) -> str:
        c = int(code)
        if c == MISSING_CODE:
            return "missing"
        if c == UNKNOWN_CODE:
            return "unknown"
        return self.categories[c - FIRST_CODE]

    def to_dict(self) -> dict:
        d = {
            "source_attribute": self.source_attribute,
            "position": self.position,
            "value_kind": self.value_kind,
            "offset": self.offset,
            "engineered": self.engineered,
        }
        if self.activity is not None:
            d["activity"] = self.activity
        if self.categories:
            d["categories"] = list(self.categories)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureDescriptor":
        return cls(
            d["source_attribute"],
            d["position"],
            d["value_kind"],
            d.get("offset", 0),
            d.get("activity"),
            tuple(d.get("categories", ())),
            d.get("engineered", False),
        )


@dataclass(frozen=True)
class EncoderConfig:
    """``history`` is ``"last_only"``, ``"k_history"`` (with ``k >= 1``) or ``"aggregated"``."""

    history: str = "last_only"
    k: int = 0
    time_from_start: bool = False
    weekday: bool = False
    running_cost: str | None = None
    exclude: tuple[str, ...] = ()

    def __post_init__(self):
        if self.history not in ("last_only", "k_history", "aggregated"):
            raise ValueError(f"unknown history mode {self.history!r}")
        if self.history == "k_history" and self.k < 1:
            raise ValueError("k_history needs k >= 1")
        if self.history != "k_history" and self.k != 0:
            raise ValueError(f"k is only meaningful for k_history, got k={self.k}")
        object.__setattr__(self, "exclude", tuple(self.exclude))

    @classmethod
    def with_history(cls, history: int | str, **kw) -> "EncoderConfig":
        """``0`` -> last event only, ``k`` -> k past events, ``"aggr"`` -> activity counts."""
        if history in ("aggr", "aggregated"):
            return cls("aggregated", 0, **kw)
        k = int(history)
        return cls("last_only", 0, **kw) if k == 0 else cls("k_history", k, **kw)

    @property
    def history_label(self) -> int | str:
        return "aggr" if self.history == "aggregated" else self.k

    @property
    def enrich_flags(self) -> dict:
        return {"time_from_start": self.time_from_start, "weekday": self.weekday,
                "running_cost": self.running_cost}

    def to_dict(self) -> dict:
        return {
            "history": self.history,
            "k": self.k,
            "time_from_start": self.time_from_start,
            "weekday": self.weekday,
            "running_cost": self.running_cost,
            "exclude": list(self.exclude),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        d = dict(d)
        d["exclude"] = tuple(d.get("exclude", ()))
        return cls(**d)


def running_cost_name(attr: str) -> str:
    return f"case_{attr}"


def engineered_names(cfg: EncoderConfig) -> set[str]:
    names = set()
    if cfg.time_from_start:
        names.add(TIME_FROM_START)
    if cfg.weekday:
        names.add(WEEKDAY)
    if cfg.running_cost:
        names.add(running_cost_name(cfg.running_cost))
    return names


def enrich(log: EventLog, time_from_start: bool = True, weekday: bool = True,
           running_cost: str | None = None) -> EventLog:
    """Add engineered attributes to every event.

    ``time_from_start`` is seconds since the first event of the case,
    ``weekday`` the English day name of the event timestamp (UTC), and
    ``running_cost`` names a numeric per-event cost column whose cumulative
    sum up to and including each event is stored as ``case_<name>``.
    """
    if running_cost is not None and log.attribute_schema.get(running_cost) is not ValueKind.NUMERIC:
        raise EncodingError(f"running cost needs a numeric cost column, {running_cost!r} is not one")
    if not (time_from_start or weekday or running_cost):
        return log
    schema = dict(log.attribute_schema)
    if time_from_start:
        schema[TIME_FROM_START] = ValueKind.NUMERIC
    if weekday:
        schema[WEEKDAY] = ValueKind.LITERAL
    cost_name = running_cost_name(running_cost) if running_cost else None
    if cost_name:
        schema[cost_name] = ValueKind.NUMERIC
    traces = []
    for t in log.traces:
        start = t.events[0].timestamp
        total = 0.0
        events = []
        for e in t.events:
            attrs = dict(e.attributes)
            if time_from_start:
                attrs[TIME_FROM_START] = (e.timestamp - start).total_seconds()
            if weekday:
                attrs[WEEKDAY] = WEEKDAYS[e.timestamp.weekday()]
            if cost_name:
                c = e.get(running_cost)
                if c is not MISSING and not np.isnan(c):
                    total += float(c)
                attrs[cost_name] = total
            events.append(Event(e.activity, e.timestamp, attrs))
        traces.append(Trace(t.case_id, tuple(events)))
    return log.with_schema(schema, traces)


def prepare(log: EventLog, cfg: EncoderConfig) -> EventLog:
    """Apply the enrichment ``cfg`` asks for (idempotent on already-enriched logs)."""
    names = engineered_names(cfg)
    if names and names <= set(log.attribute_schema):
        return log
    return enrich(log, **cfg.enrich_flags)


@dataclass
class EncodedDataset:
    rows: np.ndarray
    labels: np.ndarray
    descriptors: tuple[FeatureDescriptor, ...]
    row_provenance: list[tuple[str, int]]
    label_kind: str = "numeric"
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.rows)
        if not (n == len(self.labels) == len(self.row_provenance)):
            raise ValueError("rows, labels and provenance differ in length")
        if self.rows.ndim != 2 or self.rows.shape[1] != len(self.descriptors):
            raise ValueError("row width does not match descriptors")

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def width(self) -> int:
        return self.rows.shape[1]

    @property
    def feature_names(self) -> list[str]:
        return [d.name for d in self.descriptors]

    @property
    def categorical_mask(self) -> np.ndarray:
        return np.array([d.is_categorical for d in self.descriptors], dtype=bool)

    def subset(self, idx) -> "EncodedDataset":
        idx = np.asarray(idx)
        return EncodedDataset(self.rows[idx], self.labels[idx], self.descriptors,
                              [self.row_provenance[i] for i in idx], self.label_kind, list(self.warnings))

    def to_csv(self, path: str | os.PathLike) -> None:
        """Write the rows as CSV plus a ``.json`` descriptor sidecar next to it."""
        df = pd.DataFrame(self.rows, columns=self.feature_names)
        df.insert(0, "prefix_length", [p for _, p in self.row_provenance])
        df.insert(0, "case_id", [c for c, _ in self.row_provenance])
        df["label"] = self.labels
        df.to_csv(path, index=False, float_format="%.17g")
        meta = {
            "label_kind": self.label_kind,
            "descriptors": [d.to_dict() for d in self.descriptors],
            "warnings": self.warnings,
        }
        with open(_sidecar(path), "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)

    @classmethod
    def from_csv(cls, path: str | os.PathLike) -> "EncodedDataset":
        with open(_sidecar(path), encoding="utf-8") as fh:
            meta = json.load(fh)
        df = pd.read_csv(path, dtype={"case_id": str})
        descriptors = tuple(FeatureDescriptor.from_dict(d) for d in meta["descriptors"])
        rows = df.iloc[:, 2:-1].to_numpy(dtype=float).reshape(len(df), len(descriptors))
        prov = list(zip(df["case_id"].tolist(), df["prefix_length"].astype(int).tolist()))
        return cls(rows, df["label"].to_numpy(dtype=float), descriptors, prov, meta["label_kind"], meta["warnings"])


def _sidecar(path) -> str:
    root, _ = os.path.splitext(os.fspath(path))
    return root + ".json"


class Encoder:
    """A trace-to-row encoder whose vocabulary is frozen from a training log."""

    def __init__(self, config: EncoderConfig, attributes: Sequence[tuple[str, str]],
                 categories: dict[str, tuple[str, ...]], alphabet: Sequence[str],
                 activity_key: str = "activity", engineered: Iterable[str] = ()):
        self.config = config
        self.attributes = list(attributes)
        self.categories = {k: tuple(v) for k, v in categories.items()}
        self.alphabet = tuple(alphabet)
        self.activity_key = activity_key
        self.engineered = set(engineered)
        self._codes = {a: {v: FIRST_CODE + i for i, v in enumerate(vals)} for a, vals in self.categories.items()}
        self._act_index = {a: i for i, a in enumerate(self.alphabet)}
        self._has_numeric = any(kind == "numeric" for _, kind in self.attributes)
        self.descriptors = tuple(self._build_descriptors())

    @classmethod
    def fit(cls, log: EventLog, config: EncoderConfig) -> "Encoder":
        """Freeze schema, category vocabularies and activity alphabet from ``log``.

        ``log`` should already carry the engineered attributes (see :func:`prepare`).
        """
        attributes = [(log.activity_key, "categorical")]
        for name, kind in log.attribute_schema.items():
            if name in config.exclude or kind is ValueKind.TIMESTAMP:
                continue
            attributes.append((name, "numeric" if kind is ValueKind.NUMERIC else "categorical"))
        seen: dict[str, set] = {a: set() for a, k in attributes if k == "categorical"}
        for t in log.traces:
            for e in t.events:
                seen[log.activity_key].add(e.activity)
                for a in seen:
                    if a == log.activity_key:
                        continue
                    v = e.get(a)
                    if v is not MISSING:
                        seen[a].add(_as_category(v))
        categories = {a: tuple(sorted(vals)) for a, vals in seen.items()}
        return cls(config, attributes, categories, sorted(log.activity_alphabet), log.activity_key,
                   engineered_names(config))

    @classmethod
    def from_descriptors(cls, descriptors: Sequence[FeatureDescriptor], config: EncoderConfig,
                         activity_key: str) -> "Encoder":
        """Rebuild an encoder from the descriptors stored with a trained model."""
        base = [d for d in descriptors if d.position == LAST_EVENT]
        attributes = [(d.source_attribute, d.value_kind) for d in base]
        categories = {d.source_attribute: d.categories for d in base if d.is_categorical}
        alphabet = [d.activity for d in descriptors if d.position == AGGREGATE]
        if not alphabet:
            alphabet = list(categories.get(activity_key, ()))
        engineered = [d.source_attribute for d in base if d.engineered]
        enc = cls(config, attributes, categories, alphabet, activity_key, engineered)
        if enc.descriptors != tuple(descriptors):
            raise EncodingError("descriptors do not describe a layout this encoder produces")
        return enc

    def _base_descriptors(self, offset: int, position: str) -> list[FeatureDescriptor]:
        return [
            FeatureDescriptor(a, position, kind, offset, None, self.categories.get(a, ()), a in self.engineered)
            for a, kind in self.attributes
        ]

    def _build_descriptors(self) -> list[FeatureDescriptor]:
        cfg = self.config
        if cfg.history == "aggregated":
            counts = [FeatureDescriptor(self.activity_key, AGGREGATE, "numeric", 0, a) for a in self.alphabet]
            return counts + self._base_descriptors(0, LAST_EVENT)
        out = []
        for j in range(cfg.k, 0, -1):
            out += self._base_descriptors(j, HISTORY)
        out += self._base_descriptors(0, LAST_EVENT)
        if cfg.k and self._has_numeric:
            out += [FeatureDescriptor("event", PRESENCE, "numeric", j) for j in range(cfg.k, 0, -1)]
        return out

    @property
    def width(self) -> int:
        return len(self.descriptors)

    def encode_event(self, e: Event) -> np.ndarray:
        row = np.empty(len(self.attributes))
        for j, (a, kind) in enumerate(self.attributes):
            v = e.activity if a == self.activity_key else e.get(a)
            if kind == "numeric":
                row[j] = np.nan if v is MISSING else float(v)
            elif v is MISSING:
                row[j] = MISSING_CODE
            else:
                row[j] = self._codes[a].get(_as_category(v), UNKNOWN_CODE)
        return row

    def _event_matrix(self, trace: Trace) -> np.ndarray:
        if not trace.events:
            return np.empty((0, len(self.attributes)))
        return np.vstack([self.encode_event(e) for e in trace.events])

    def _pad_row(self) -> np.ndarray:
        return np.array([0.0 if kind == "numeric" else MISSING_CODE for _, kind in self.attributes])

    def encode_trace(self, trace: Trace, warnings: list[str] | None = None) -> np.ndarray:
        """Rows for every prefix of ``trace``, prefix length 1 first."""
        z = self._event_matrix(trace)
        n, s = z.shape
        cfg = self.config
        if cfg.history == "aggregated":
            onehot = np.zeros((n, len(self.alphabet)))
            for i, e in enumerate(trace.events):
                j = self._act_index.get(e.activity)
                if j is None:
                    if warnings is not None:
                        warnings.append(f"case {trace.case_id}: activity {e.activity!r} not in training alphabet")
                else:
                    onehot[i, j] = 1.0
            return np.hstack([np.cumsum(onehot, axis=0), z])
        k = cfg.k
        if k == 0:
            return z
        padded = np.vstack([np.tile(self._pad_row(), (k, 1)), z])
        windows = np.lib.stride_tricks.sliding_window_view(padded, (k + 1, s))[:, 0]
        rows = windows.reshape(n, (k + 1) * s)
        if self._has_numeric:
            pos = np.arange(1, n + 1)[:, None]
            flags = (pos > np.arange(k, 0, -1)[None, :]).astype(float)
            rows = np.hstack([rows, flags])
        return rows

    def encode_prefix(self, prefix: Trace) -> np.ndarray:
        return self.encode_trace(prefix)[-1]

    def build_dataset(self, log: EventLog, kpi: KpiSpec, include_full_prefix: bool = True) -> EncodedDataset:
        """One labelled row per prefix of every trace of ``log``.

        Traces that cannot be labelled are left out with a warning.
        ``include_full_prefix=False`` drops the complete trace itself, whose
        remaining time is trivially zero.
        """
        blocks, labels, prov = [], [], []
        warnings: list[str] = []
        excluded = 0
        for t in log.traces:
            try:
                y = trace_labels(kpi, t)
            except LabelingError as exc:
                excluded += 1
                warnings.append(str(exc))
                continue
            rows = self.encode_trace(t, warnings)
            n = len(t) if include_full_prefix else len(t) - 1
            blocks.append(rows[:n])
            labels.append(y[:n])
            prov += [(t.case_id, i) for i in range(1, n + 1)]
        if excluded:
            warnings.append(f"{excluded} trace(s) excluded: KPI could not be computed")
        rows = np.vstack(blocks) if blocks else np.empty((0, self.width))
        y = np.concatenate(labels) if labels else np.empty(0)
        return EncodedDataset(rows, y, self.descriptors, prov, kpi.value_kind, warnings)

    def state_dict(self) -> dict:
        return {"config": self.config.to_dict(), "activity_key": self.activity_key,
                "descriptors": [d.to_dict() for d in self.descriptors]}


def _as_category(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def encode_k_history(encoder: Encoder, prefix: Trace) -> np.ndarray:
    if encoder.config.history == "aggregated":
        raise EncodingError("encoder is configured for aggregated history")
    return encoder.encode_prefix(prefix)


def encode_aggregated(encoder: Encoder, prefix: Trace) -> np.ndarray:
    if encoder.config.history != "aggregated":
        raise EncodingError("encoder is not configured for aggregated history")
    return encoder.encode_prefix(prefix)


def build_dataset(log: EventLog, kpi: KpiSpec, cfg: EncoderConfig,
                  encoder: Encoder | None = None, include_full_prefix: bool = True) -> EncodedDataset:
    """Enrich ``log`` as ``cfg`` asks, fit an encoder on it unless given one, and encode."""
    log = prepare(log, cfg)
    encoder = encoder or Encoder.fit(log, cfg)
    return encoder.build_dataset(log, kpi, include_full_prefix)
