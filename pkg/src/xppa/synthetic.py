"""Generators for event logs with a known ground truth.

Each generator plants a signal whose correct explanation is known in
advance, so the end-to-end pipeline can be checked against it.
"""

from __future__ import annotations

from datetime import datetime, timedelta, timezone

import numpy as np

from .event_log import EventLog, Event, Trace, ValueKind

EPOCH = datetime(2024, 1, 1, tzinfo=timezone.utc)
DAY = 86400.0


def _ts(seconds: float) -> datetime:
    return EPOCH + timedelta(milliseconds=int(round(seconds * 1000)))


def _case_starts(rng, n: int) -> np.ndarray:
    """Strictly increasing case start offsets (seconds), about two hours apart."""
    return np.cumsum(rng.uniform(600, 13800, n))


def closure_log(n_traces: int = 5000, slow_share: float = 0.3, seed: int = 0) -> EventLog:
    """Remaining time fully determined by the ``closure_type`` case attribute.

    Every case runs ``Open -> Check -> [Review ->] Close``; all events but the
    last happen within minutes, and ``Close`` follows after one day for
    ``fast`` cases and ten days for ``slow`` ones. ``channel`` is noise.
    Explain with ``include_full_prefix=False``: the planted top label is
    ``closure_type=slow``.
    """
    rng = np.random.default_rng(seed)
    starts = _case_starts(rng, n_traces)
    slow = rng.random(n_traces) < slow_share
    review = rng.random(n_traces) < 0.5
    channel = rng.choice(["web", "phone", "branch"], n_traces)
    traces = []
    for c in range(n_traces):
        closure = "slow" if slow[c] else "fast"
        attrs = {"closure_type": closure, "channel": str(channel[c])}
        acts = ["Open", "Check"] + (["Review"] if review[c] else [])
        t = starts[c]
        events = []
        for a in acts:
            events.append(Event(a, _ts(t), attrs))
            t += rng.uniform(30, 300)
        t += (10.0 if slow[c] else 1.0) * DAY
        events.append(Event("Close", _ts(t), attrs))
        traces.append(Trace(f"c{c:05d}", events))
    schema = {"closure_type": ValueKind.LITERAL, "channel": ValueKind.LITERAL}
    return EventLog(traces, schema)


def history_log(n_traces: int = 800, k_star: int | str = 2, length: int = 8, cumulative: bool = True,
                noise_days: float = 0.2, seed: int = 0) -> EventLog:
    """Remaining time that depends on activities up to ``k_star`` events back.

    Activities are uniform over ``A..D`` and each event carries its position
    as the numeric attribute ``step``. The remaining time after event ``i``
    of an ``length``-event case is ``(length - i) * 10`` days plus one day for
    every ``A`` among the events at offsets ``0..k_star`` back (``cumulative``)
    or exactly at offset ``k_star`` (otherwise), plus uniform noise. With
    ``k_star="aggr"`` every ``A`` in the prefix counts. The final event has
    zero remaining time.
    """
    if k_star != "aggr" and int(k_star) < 0:
        raise ValueError("k_star must be non-negative or 'aggr'")
    rng = np.random.default_rng(seed)
    starts = _case_starts(rng, n_traces)
    acts = rng.choice(np.array(list("ABCD")), (n_traces, length))
    is_a = (acts == "A").astype(float)
    noise = rng.uniform(0, noise_days, (n_traces, length))
    traces = []
    for c in range(n_traces):
        rem = np.empty(length)
        for i in range(length):
            if k_star == "aggr":
                signal = is_a[c, :i + 1].sum()
            elif cumulative:
                signal = is_a[c, max(0, i - int(k_star)):i + 1].sum()
            else:
                signal = is_a[c, i - int(k_star)] if i >= int(k_star) else 0.0
            rem[i] = (length - 1 - i) * 10.0 + signal + noise[c, i]
        rem[-1] = 0.0
        end = starts[c] + rem[0] * DAY
        events = [Event(str(acts[c, i]), _ts(end - rem[i] * DAY), {"step": float(i + 1)}) for i in range(length)]
        traces.append(Trace(f"h{c:05d}", events))
    return EventLog(traces, {"step": ValueKind.NUMERIC})


def escalation_log(n_traces: int = 1500, seed: int = 0) -> EventLog:
    """Occurrence of ``Escalate`` is decided by the ``priority`` case attribute.

    Cases run ``Register -> Triage -> Work -> [Escalate ->] Close`` and
    ``Escalate`` happens exactly for ``priority=high``. ``team`` is noise
    and ``effort`` is a numeric per-event attribute.
    """
    rng = np.random.default_rng(seed)
    starts = _case_starts(rng, n_traces)
    high = rng.random(n_traces) < 0.35
    team = rng.choice(["north", "south"], n_traces)
    traces = []
    for c in range(n_traces):
        attrs = {"priority": "high" if high[c] else "low", "team": str(team[c])}
        acts = ["Register", "Triage", "Work"] + (["Escalate"] if high[c] else []) + ["Close"]
        t = starts[c]
        events = []
        for a in acts:
            events.append(Event(a, _ts(t), {**attrs, "effort": float(np.round(rng.uniform(1, 5), 2))}))
            t += rng.uniform(0.1, 2.0) * DAY
        traces.append(Trace(f"e{c:05d}", events))
    schema = {"priority": ValueKind.LITERAL, "team": ValueKind.LITERAL, "effort": ValueKind.NUMERIC}
    return EventLog(traces, schema)


def ticket_log(n_traces: int = 600, seed: int = 0) -> EventLog:
    """A small help-desk style log mixing several effects, used by the demos.

    Remaining time grows with ``priority=low`` (waits longer), with a
    ``Wait for customer`` step and with the ``Specialist`` resource; every
    event costs money (``cost``) that accumulates over the case.
    """
    rng = np.random.default_rng(seed)
    starts = _case_starts(rng, n_traces)
    traces = []
    for c in range(n_traces):
        priority = str(rng.choice(["high", "medium", "low"], p=[0.2, 0.5, 0.3]))
        slow_factor = {"high": 0.5, "medium": 1.0, "low": 2.0}[priority]
        acts = ["Insert ticket", "Assign seriousness", "Take in charge"]
        if rng.random() < 0.4:
            acts.append("Wait for customer")
        if rng.random() < 0.3:
            acts.append("Require upgrade")
        acts += ["Resolve ticket", "Closed"]
        t = starts[c]
        events = []
        for a in acts:
            resource = "Specialist" if a == "Require upgrade" else str(rng.choice(["Value 1", "Value 2", "Value 3"]))
            cost = {"Require upgrade": 120.0, "Wait for customer": 5.0}.get(a, 20.0) * rng.uniform(0.8, 1.2)
            events.append(Event(a, _ts(t), {"priority": priority, "resource": resource,
                                            "cost": float(np.round(cost, 2))}))
            gap = rng.exponential(0.5) * slow_factor
            if a == "Wait for customer":
                gap += 4.0
            if resource == "Specialist":
                gap += 2.0
            t += gap * DAY
        traces.append(Trace(f"t{c:04d}", events))
    schema = {"priority": ValueKind.LITERAL, "resource": ValueKind.LITERAL, "cost": ValueKind.NUMERIC}
    return EventLog(traces, schema)
