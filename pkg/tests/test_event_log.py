from datetime import datetime, timedelta, timezone

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xppa.event_log import (
    MISSING,
    CsvConfig,
    Event,
    EventLog,
    RowError,
    SchemaError,
    Trace,
    ValueKind,
    log_statistics,
    parse_csv,
    prefixes,
    read_xes,
    write_csv,
)

T0 = datetime(2024, 3, 1, 8, 0, tzinfo=timezone.utc)

FIXTURE = b"""case_id,activity,timestamp
c1,A,2024-03-01T08:00:00Z
c2,A,2024-03-01T08:00:01Z
c1,B,2024-03-01T08:00:05Z
"""


def make_log(lengths, gaps_hours=None):
    traces = []
    for c, n in enumerate(lengths):
        gap = timedelta(hours=(gaps_hours or [1] * len(lengths))[c])
        traces.append(Trace(f"c{c}", [Event("A", T0 + i * gap) for i in range(n)]))
    return EventLog(traces, {})


class TestParseCsv:
    def test_minimal_fixture(self):
        log = parse_csv(FIXTURE)
        assert len(log) == 2
        assert log.activity_alphabet == {"A", "B"}
        assert [e.activity for e in log.trace("c1")] == ["A", "B"]
        assert log.trace("c2").events[0].timestamp == T0 + timedelta(seconds=1)

    def test_header_only(self):
        log = parse_csv(b"case_id,activity,timestamp\n")
        assert len(log) == 0
        assert log.activity_alphabet == frozenset()

    def test_missing_column_is_schema_error(self):
        with pytest.raises(SchemaError, match="timestamp"):
            parse_csv(b"case_id,activity\nc1,A\n")

    def test_bad_timestamp_reports_line(self):
        data = FIXTURE + b"c3,A,not-a-date\n"
        with pytest.raises(RowError) as info:
            parse_csv(data)
        assert info.value.line == 5

    def test_empty_cell_becomes_missing(self):
        log = parse_csv(b"case_id,activity,timestamp,amount\nc1,A,2024-01-01T00:00:00Z,\n"
                        b"c1,B,2024-01-01T01:00:00Z,3.5\n")
        first, second = log.trace("c1").events
        assert first.get("amount") is MISSING
        assert second.get("amount") == 3.5
        assert log.attribute_schema["amount"] is ValueKind.NUMERIC

    def test_kind_inference(self):
        log = parse_csv(b"case_id,activity,timestamp,n,flag,who\n"
                        b"c1,A,2024-01-01T00:00:00Z,1,true,ann\n"
                        b"c1,B,2024-01-01T00:01:00Z,2.5,FALSE,7\n")
        assert dict(log.attribute_schema) == {"n": ValueKind.NUMERIC, "flag": ValueKind.BOOLEAN,
                                              "who": ValueKind.LITERAL}
        assert log.trace("c1").events[1].get("flag") is False

    def test_declared_kind_mismatch(self):
        cfg = CsvConfig(kinds={"n": ValueKind.NUMERIC})
        with pytest.raises(SchemaError, match="mixes"):
            parse_csv(b"case_id,activity,timestamp,n\nc1,A,2024-01-01T00:00:00Z,x\n", cfg)

    def test_ties_keep_file_order(self):
        log = parse_csv(b"case_id,activity,timestamp\nc1,B,2024-01-01T00:00:00Z\n"
                        b"c1,A,2024-01-01T00:00:00Z\nc1,C,2023-12-31T00:00:00Z\n")
        assert [e.activity for e in log.trace("c1")] == ["C", "B", "A"]

    def test_column_mapping_and_format(self):
        cfg = CsvConfig("Case", "Task", "When", "%d/%m/%Y %H:%M")
        log = parse_csv(b"Case,Task,When\nx,A,02/01/2024 10:30\n", cfg)
        assert log.trace("x").events[0].timestamp == datetime(2024, 1, 2, 10, 30, tzinfo=timezone.utc)
        assert log.activity_key == "Task"

    def test_duplicate_case_ids_rejected(self):
        t = Trace("c", [Event("A", T0)])
        with pytest.raises(SchemaError):
            EventLog([t, t], {})

    def test_unknown_case_lookup(self):
        with pytest.raises(KeyError, match="case not found"):
            parse_csv(FIXTURE).trace("zzz")


event_rows = st.lists(
    st.tuples(
        st.integers(0, 4),
        st.sampled_from(["A", "B", "C d", "e,f"]),
        st.integers(0, 10**9),
        st.one_of(st.none(), st.floats(-1e6, 1e6, allow_nan=False)),
        st.one_of(st.none(), st.booleans()),
        st.one_of(st.none(), st.sampled_from(["x", "y z", "1a"])),
    ),
    min_size=1,
    max_size=30,
)


def _rows_to_csv(rows):
    lines = ["case_id,activity,timestamp,amount,flag,tag"]
    for case, act, ms, amount, flag, tag in rows:
        ts = (T0 + timedelta(milliseconds=ms)).strftime("%Y-%m-%dT%H:%M:%S.%f")[:-3] + "Z"
        act = f'"{act}"' if "," in act else act
        amount = "" if amount is None else repr(amount)
        flag = "" if flag is None else str(flag).lower()
        lines.append(f"k{case},{act},{ts},{amount},{flag},{tag or ''}")
    return ("\n".join(lines) + "\n").encode()


class TestRoundTrip:
    @settings(max_examples=60, deadline=None)
    @given(event_rows)
    def test_parse_write_parse_is_identity(self, rows):
        cfg = CsvConfig(kinds={"amount": ValueKind.NUMERIC, "flag": ValueKind.BOOLEAN, "tag": ValueKind.LITERAL})
        log = parse_csv(_rows_to_csv(rows), cfg)
        again = parse_csv(write_csv(log).encode(), cfg)
        assert again == log

    @settings(max_examples=40, deadline=None)
    @given(event_rows, st.randoms(use_true_random=False))
    def test_row_order_does_not_matter_with_distinct_times(self, rows, rnd):
        seen, distinct = set(), []
        for r in rows:
            if (r[0], r[2]) not in seen:
                seen.add((r[0], r[2]))
                distinct.append(r)
        shuffled = list(distinct)
        rnd.shuffle(shuffled)
        a, b = parse_csv(_rows_to_csv(distinct)), parse_csv(_rows_to_csv(shuffled))
        for t in a:
            assert b.trace(t.case_id) == t

    def test_canonical_timestamp_format(self):
        text = write_csv(parse_csv(FIXTURE))
        assert "2024-03-01T08:00:05.000Z" in text


class TestStatistics:
    def test_degenerate_trace(self):
        s = log_statistics(make_log([1]))
        assert s.mean_events_per_trace == 1 and s.median_events_per_trace == 1
        assert s.mean_duration == timedelta(0)

    def test_lengths_and_durations(self):
        # lengths 2 and 4; durations 10h (one 10h gap) and 20h (three gaps of 20/3 h)
        log = make_log([2, 4], [10, 20 / 3])
        s = log_statistics(log)
        lengths = [len(t) for t in log]
        durations = [t.duration.total_seconds() for t in log]
        assert s.mean_events_per_trace == pytest.approx(np.mean(lengths)) == pytest.approx(3.0)
        assert s.median_events_per_trace == pytest.approx(3.0)
        assert s.mean_duration.total_seconds() == pytest.approx(np.mean(durations), abs=1e-3)
        assert s.mean_duration.total_seconds() == pytest.approx(15 * 3600, abs=1e-3)
        assert s.std_duration.total_seconds() == pytest.approx(np.std(durations), abs=1e-3)

    def test_empty_log(self):
        s = log_statistics(EventLog((), {}))
        assert s.n_traces == 0 and s.mean_events_per_trace == 0
        assert s.mean_duration == timedelta(0)

    def test_counts_activities(self):
        s = log_statistics(parse_csv(FIXTURE))
        assert (s.n_traces, s.n_activities) == (2, 2)


class TestPrefixes:
    def test_single_event(self):
        t = make_log([1]).traces[0]
        assert prefixes(t) == [t]

    def test_lengths(self):
        t = make_log([4]).traces[0]
        ps = prefixes(t)
        assert [len(p) for p in ps] == [1, 2, 3, 4]
        assert all(p.case_id == t.case_id for p in ps)
        assert ps[2].events == t.events[:3]

    @given(st.lists(st.integers(1, 9), min_size=1, max_size=12))
    def test_total_prefix_count(self, lengths):
        log = make_log(lengths)
        assert sum(len(prefixes(t)) for t in log) == sum(lengths)

    def test_example_total(self):
        assert sum(len(prefixes(t)) for t in make_log([2, 3, 5])) == 10


XES = b"""<?xml version="1.0" encoding="UTF-8"?>
<log xmlns="http://www.xes-standard.org/">
  <trace>
    <string key="concept:name" value="case-1"/>
    <string key="priority" value="high"/>
    <event>
      <string key="concept:name" value="Submit"/>
      <date key="time:timestamp" value="2024-01-01T10:00:00.000+01:00"/>
      <string key="org:resource" value="ann"/>
      <float key="amount" value="12.5"/>
    </event>
    <event>
      <string key="concept:name" value="Approve"/>
      <date key="time:timestamp" value="2024-01-01T12:00:00.000+01:00"/>
      <string key="org:resource" value="bob"/>
    </event>
  </trace>
</log>
"""


class TestXes:
    def test_import(self, tmp_path):
        path = tmp_path / "log.xes"
        path.write_bytes(XES)
        log = read_xes(path)
        t = log.trace("case-1")
        assert [e.activity for e in t] == ["Submit", "Approve"]
        assert t.start == datetime(2024, 1, 1, 9, 0, tzinfo=timezone.utc)
        assert t.events[0].get("resource") == "ann"
        assert t.events[1].get("priority") == "high"
        assert t.events[1].get("amount") is MISSING
        assert log.attribute_schema["amount"] is ValueKind.NUMERIC
