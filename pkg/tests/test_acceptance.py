"""Acceptance gate: one test per criterion, each reported as a PASS/FAIL/BLOCKED line.

Run ``pytest tests/test_acceptance.py -v`` and read the "acceptance criteria"
section printed at the end of the session.
"""

import json
import os
import time
from dataclasses import replace
from datetime import datetime, timedelta, timezone

import numpy as np
import pytest

from oracles import brute_force_shapley, random_tree_oracle, tree_family
from xppa import synthetic
from xppa.cli import main
from xppa.encoding import EncoderConfig, build_dataset
from xppa.event_log import Event, EventLog, Trace, ValueKind, write_csv
from xppa.gbdt import TrainConfig
from xppa.kpi import KpiSpec, trace_labels
from xppa.pipeline import (
    Context,
    RunConfig,
    evaluate_stage,
    fit_stage,
    history_search,
    load_config,
    make_explainer,
    run_experiment,
    split,
)
from xppa.shapley import (
    PayoutConfig,
    bucket_index,
    exact_shapley,
    explain_rows,
    fit_discretizer,
    rescale_boolean,
    sampled_shapley,
)

DAY = 86400.0


def oracle_cases():
    """Fifty-four tree-ensemble instances with 2 to 10 features each."""
    for i in range(54):
        yield 2 + i % 9, 1000 + i


@pytest.mark.criterion(1, "Shapley axioms on random tree oracles")
def test_axioms(record_property):
    t0 = time.perf_counter()
    worst = {"efficiency": 0.0, "symmetry": 0.0, "dummy": 0.0, "linearity": 0.0}
    n = 0
    for m, seed in oracle_cases():
        (f, g), bg, x = tree_family(m, seed)
        assert bg.shape == (100, m)

        v = exact_shapley(f, x, PayoutConfig(bg))
        pred = float(f(x))
        worst["efficiency"] = max(worst["efficiency"],
                                  abs(v.values.sum() + v.base_value - pred) / max(1.0, abs(pred)))

        # make columns i, j interchangeable: symmetrised oracle, swap-closed background, equal instance values
        i, j = 0, m - 1
        swap = np.arange(m)
        swap[[i, j]] = [j, i]
        sym = lambda X: f(X) + f(X[:, swap])  # noqa: E731
        sym_bg = np.vstack([bg[:50], bg[:50][:, swap]])
        xs = x.copy()
        xs[j] = xs[i]
        vs = exact_shapley(sym, xs, PayoutConfig(sym_bg))
        worst["symmetry"] = max(worst["symmetry"], abs(vs.values[i] - vs.values[j]))

        # column d is ignored by the oracle
        d = m // 2
        const = float(bg[0, d])

        def blind(X, d=d, const=const):
            Z = np.array(X, copy=True)
            Z[:, d] = const
            return f(Z)

        vd = exact_shapley(blind, x, PayoutConfig(bg))
        worst["dummy"] = max(worst["dummy"], abs(vd.values[d]))

        a, b = 2.0, -0.5
        combo = lambda X: a * f(X) + b * g(X)  # noqa: E731
        vc = exact_shapley(combo, x, PayoutConfig(bg))
        vg = exact_shapley(g, x, PayoutConfig(bg))
        worst["linearity"] = max(worst["linearity"], float(np.max(np.abs(vc.values - (a * v.values + b * vg.values)))))
        n += 1
    elapsed = time.perf_counter() - t0
    record_property("detail", f"{n} instances, " + ", ".join(f"{k} {w:.1e}" for k, w in worst.items())
                    + f", {elapsed:.1f}s")
    assert n >= 50
    assert worst["efficiency"] <= 1e-6
    assert worst["symmetry"] <= 1e-9 and worst["dummy"] <= 1e-9 and worst["linearity"] <= 1e-9
    assert elapsed < 60


@pytest.mark.criterion(2, "exact Shapley equals brute-force subset formula")
def test_brute_force_equivalence(record_property):
    worst = 0.0
    n = 0
    for m, seed in oracle_cases():
        f, bg, x = random_tree_oracle(m, seed)
        v = exact_shapley(f, x, PayoutConfig(bg))
        psi, base, pred = brute_force_shapley(f, x, bg)
        worst = max(worst, float(np.max(np.abs(v.values - psi))), abs(v.base_value - base), abs(v.prediction - pred))
        n += 1
    record_property("detail", f"{n} oracles with m<=10, max abs difference {worst:.1e}")
    assert worst <= 1e-9


@pytest.mark.criterion(3, "2000-permutation sampling converges to exact values")
def test_sampling_convergence(record_property):
    worst = 0.0
    for seed in (7, 8, 9):
        f, bg, x = random_tree_oracle(8, seed)
        exact = exact_shapley(f, x, PayoutConfig(bg)).values
        a = sampled_shapley(f, x, PayoutConfig(bg), n_permutations=2000, seed=42).values
        b = sampled_shapley(f, x, PayoutConfig(bg), n_permutations=2000, seed=42).values
        np.testing.assert_array_equal(a, b)
        spread = exact.max() - exact.min()
        worst = max(worst, float(np.max(np.abs(a - exact)) / spread))
    record_property("detail", f"worst component error {100 * worst:.2f}% of the exact range (limit 5%)")
    assert worst <= 0.05


def _expected_labels(ctx, cfg):
    full = cfg.include_full_prefix
    parts = [trace_labels(ctx.kpi, t)[: len(t) if full else len(t) - 1] for t in ctx.test]
    return np.concatenate(parts)


@pytest.mark.criterion(4, "planted categorical signal end to end (5000 traces)")
def test_planted_end_to_end(tmp_path, record_property):
    t0 = time.perf_counter()
    write_csv(synthetic.closure_log(5000, seed=0), tmp_path / "log.csv")
    cfg = RunConfig.from_dict({"log": "log.csv", "kpi": {"kind": "remaining_time"}, "output_dir": "out"},
                              base_dir=tmp_path)
    result = run_experiment(cfg)
    elapsed = time.perf_counter() - t0
    labels = _expected_labels(Context.load(cfg), cfg)
    assert len(labels) == result.report["n_test_rows"]
    mean_days = labels.mean() / DAY
    mae_days = result.report["test_score"]
    top = result.global_explanations[0]["label"]
    record_property("detail", f"MAE {mae_days:.4f}d vs mean target {mean_days:.3f}d "
                    f"({100 * mae_days / mean_days:.2f}%), top label {top}, {elapsed:.0f}s")
    assert mae_days <= 0.05 * mean_days
    assert top == "closure_type=slow"
    assert elapsed < 300


@pytest.mark.criterion(5, "history heuristic within 1% of complete search")
def test_history_heuristic(record_property):
    base = TrainConfig(n_trees=200, max_depth=4, min_samples_leaf=20)
    kpi = KpiSpec.remaining_time()
    rows = []
    for k_star in (0, 1, 2, 3, "aggr"):
        train, val, _ = split(synthetic.history_log(800, k_star, seed=11))
        h = history_search(train, val, kpi, base)
        c = history_search(train, val, kpi, base, mode="complete")
        rows.append((k_star, h.chosen_history, c.chosen_history, h.validation_score / c.validation_score - 1))
    record_property("detail", "; ".join(f"k*={k}: heuristic {hk} complete {ck} gap {100 * g:+.2f}%"
                                        for k, hk, ck, g in rows))
    assert all(g <= 0.01 for *_, g in rows)


PUBLIC_LOGS = {
    "bpic2013": ("XPPA_BPIC2013_CONFIG", 12.5, 0.10),
    "helpdesk": ("XPPA_HELPDESK_CONFIG", 7.0, None),
}


@pytest.mark.criterion(6, "desk-scale public-log reproduction")
@pytest.mark.slow
@pytest.mark.parametrize("name", sorted(PUBLIC_LOGS))
def test_public_logs(name, tmp_path, record_property):
    var, limit, margin = PUBLIC_LOGS[name]
    path = os.environ.get(var)
    if not path:
        pytest.skip(f"{name} log not available offline; set {var} to a run config pointing at a local copy")
    cfg = load_config(path)
    cfg = replace(cfg, output_dir=str(tmp_path / "out"), search={**cfg.search, "large_grid": False})
    assert cfg.kpi["kind"] == "remaining_time"
    assert max(cfg.grid["n_trees"]) <= 600
    t0 = time.perf_counter()
    report = run_experiment(cfg).report
    elapsed = time.perf_counter() - t0
    gain = 1 - report["test_score"] / report["baseline_score"]
    record_property("detail", f"{name}: MAE {report['test_score']:.2f}d (limit {limit}), "
                    f"{100 * gain:.1f}% better than the prefix-index baseline, {elapsed / 60:.1f} min")
    assert report["test_score"] <= limit
    if margin is not None:
        assert gain >= margin
    assert elapsed <= 15 * 60


@pytest.mark.criterion(7, "boolean KPI: F1 and [-1,+1] rescaling")
def test_boolean_path(tmp_path, record_property):
    write_csv(synthetic.escalation_log(1500, seed=3), tmp_path / "log.csv")
    cfg = RunConfig.from_dict({"log": "log.csv", "output_dir": "out",
                               "kpi": {"kind": "activity_occurrence", "target": "Escalate"}}, base_dir=tmp_path)
    result = run_experiment(cfg)
    score = result.report["test_score"]
    assert result.report["metric"] == "f1"
    for r in result.explanations:
        assert -1 <= r["base_value"] <= 1 and -1 <= r["prediction"] <= 1

    ctx = Context.load(cfg)
    fitted = fit_stage(ctx)
    ev = evaluate_stage(ctx, fitted)
    explainer = make_explainer(ctx, fitted)
    raw = explain_rows(fitted.model.predict, ev.test_ds.rows[:300], explainer.payout,
                       features=fitted.model.used_features)
    same_rank = 0
    for v in raw:
        r = rescale_boolean(replace(v, scale="probability"))
        assert -1 <= r.base_value <= 1 and -1 <= r.prediction <= 1
        assert r.values.sum() == pytest.approx(r.prediction - r.base_value, abs=1e-9)
        same_rank += np.array_equal(np.argsort(-np.abs(r.values), kind="stable"),
                                    np.argsort(-np.abs(v.values), kind="stable"))
    record_property("detail", f"test F1 {score:.4f}; {len(raw)} rescaled explanations inside [-1,+1], "
                    f"{same_rank} keep their |psi| ranking")
    assert score >= 0.95
    assert same_rank == len(raw)


@pytest.mark.criterion(8, "discretizer partitions the line and finds a step")
def test_discretizer(record_property):
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        n = int(rng.integers(20, 300))
        x = rng.normal(size=n) * rng.uniform(0.1, 100)
        x = np.round(x, int(rng.integers(0, 4)))
        y = rng.normal(size=n) + rng.uniform(0, 3) * (x > np.median(x))
        q = int(rng.integers(2, 11))
        b = fit_discretizer(x, y, max_buckets=q, min_samples_leaf=int(rng.integers(1, 6)))
        assert np.all(np.diff(b) > 0)
        assert len(b) + 1 <= q
        edges = np.concatenate([[-np.inf], b, [np.inf]])
        probes = np.concatenate([x, b, [-np.inf, np.inf, -1e300, 1e300]])
        for v in probes:
            inside = [(lo <= v < hi) or (hi == np.inf and v == np.inf) for lo, hi in zip(edges[:-1], edges[1:])]
            assert sum(inside) == 1
            assert inside[bucket_index(b, v)]

    x = np.sort(rng.uniform(0, 10, 500))
    step = fit_discretizer(x, np.where(x < 4.2, 1.0, 7.0), max_buckets=8)
    below, above = x[x < 4.2].max(), x[x >= 4.2].min()
    record_property("detail", f"1000 random features partitioned; step at 4.2 recovered as {step.tolist()}")
    assert len(step) == 1 and below < step[0] <= above


@pytest.mark.criterion(9, "seeded runs give byte-identical JSON")
def test_determinism(tmp_path, record_property):
    write_csv(synthetic.ticket_log(300, seed=4), tmp_path / "log.csv")
    (tmp_path / "run.json").write_text(json.dumps({
        "log": "log.csv", "kpi": {"kind": "remaining_time"}, "output_dir": "out", "seed": 5,
        "split": {"strategy": "random"}, "search": {"grid": {"n_trees": [40, 80], "max_depth": [3, 4]}}}))
    out = tmp_path / "out"

    def snapshot():
        assert main(["run", "--config", str(tmp_path / "run.json")]) == 0
        return {p.name: p.read_bytes() for p in sorted(out.glob("*.json"))}

    first = snapshot()
    second = snapshot()
    record_property("detail", f"{len(first)} JSON files compared: " + ", ".join(first))
    assert len(first) >= 5
    assert first == second


T0 = datetime(2024, 1, 1, tzinfo=timezone.utc)


def random_log(rng):
    traces = []
    for c in range(int(rng.integers(1, 15))):
        t = T0 + timedelta(hours=float(rng.uniform(0, 1000)))
        events = []
        for _ in range(int(rng.integers(1, 9))):
            attrs = {"res": str(rng.choice(["r1", "r2", "r3"])), "cost": float(rng.integers(0, 50))}
            events.append(Event(str(rng.choice(list("ABCD"))), t, attrs))
            t += timedelta(minutes=float(rng.uniform(0, 600)))
        traces.append(Trace(f"c{c}", events))
    return EventLog(traces, {"res": ValueKind.LITERAL, "cost": ValueKind.NUMERIC})


@pytest.mark.criterion(10, "one row per prefix; occurrence label false at the end")
def test_dataset_construction(record_property):
    rng = np.random.default_rng(10)
    total_rows = 0
    for _ in range(100):
        log = random_log(rng)
        expected = sum(len(t) for t in log)
        for history in (0, 2, "aggr"):
            ds = build_dataset(log, KpiSpec.remaining_time(), EncoderConfig.with_history(history))
            assert len(ds) == expected
        occ = build_dataset(log, KpiSpec.activity_occurrence("A"), EncoderConfig())
        assert len(occ) == expected
        lengths = {t.case_id: len(t) for t in log}
        at_end = [lab for lab, (cid, i) in zip(occ.labels, occ.row_provenance) if i == lengths[cid]]
        assert len(at_end) == len(log) and not any(at_end)
        total_rows += expected
    record_property("detail", f"100 logs, {total_rows} prefix rows, every final-position label false")
