import json
from datetime import datetime, timedelta, timezone
from importlib import resources

import jsonschema
import numpy as np
import pytest
from hypothesis import given, strategies as st

from xppa import synthetic
from xppa.encoding import EncoderConfig, build_dataset
from xppa.event_log import Event, EventLog, Trace, ValueKind, write_csv
from xppa.gbdt import TrainConfig
from xppa.kpi import KpiSpec
from xppa.pipeline import (
    ConfigError,
    PipelineError,
    RunConfig,
    SplitSpec,
    f1,
    grid_search,
    history_search,
    improves,
    load_config,
    mae,
    prefix_index_baseline,
    run_experiment,
    split,
)

T0 = datetime(2024, 1, 1, tzinfo=timezone.utc)
DAY = 86400.0


def timed_log(n):
    return EventLog([Trace(f"c{i}", [Event("A", T0 + timedelta(days=i))]) for i in range(1, n + 1)], {})


class TestSplit:
    def test_nine_traces(self):
        train, val, test = split(timed_log(9))
        assert (len(train), len(val), len(test)) == (5, 1, 3)

    def test_chronological_test_is_latest(self):
        log = timed_log(9)
        shuffled = log.with_traces(reversed(log.traces))
        _, _, test = split(shuffled)
        assert {t.case_id for t in test} == {"c7", "c8", "c9"}

    @given(st.integers(3, 60), st.sampled_from(["chronological", "random"]), st.integers(0, 99))
    def test_partition(self, n, strategy, seed):
        log = timed_log(n)
        parts = split(log, SplitSpec(strategy=strategy, seed=seed))
        ids = [t.case_id for p in parts for t in p]
        assert sorted(ids) == sorted(t.case_id for t in log)
        assert all(len(p) >= 1 for p in parts)

    def test_random_split_is_seeded(self):
        a = split(timed_log(30), SplitSpec(strategy="random", seed=3))
        b = split(timed_log(30), SplitSpec(strategy="random", seed=3))
        assert [t.case_id for t in a[2]] == [t.case_id for t in b[2]]

    def test_too_few_traces(self):
        with pytest.raises(ConfigError):
            split(timed_log(2))

    def test_fraction_bounds(self):
        with pytest.raises(ConfigError):
            SplitSpec(train_fraction=1.0)


class TestScore:
    def test_perfect_and_offset(self):
        y = np.arange(10.0)
        assert mae(y, y) == 0.0
        assert mae(y, y + 0.5 * DAY) == pytest.approx(0.5 * DAY)

    def test_f1_from_confusion(self):
        t = np.array([1] * 10 + [0] * 2 + [0] * 5)
        p = np.array([1] * 8 + [0] * 2 + [1] * 2 + [0] * 5)
        precision, recall = 8 / 10, 8 / 10
        assert f1(t, p) == pytest.approx(2 * precision * recall / (precision + recall))
        assert f1(t, p) == pytest.approx(0.8)

    def test_empty(self):
        with pytest.raises(ValueError):
            mae([], [])
        with pytest.raises(ValueError):
            f1([], [])

    @given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=50))
    def test_f1_range(self, pairs):
        t, p = zip(*pairs)
        assert 0.0 <= f1(t, p) <= 1.0

    def test_relative_improvement(self):
        assert improves(0.98, 1.0, "numeric") and not improves(0.995, 1.0, "numeric")
        assert improves(0.81, 0.8, "boolean") is True
        assert not improves(0.805, 0.8, "boolean")

    def test_prefix_baseline(self):
        log = synthetic.history_log(30, 0, seed=2)
        ds = build_dataset(log, KpiSpec.remaining_time(), EncoderConfig())
        lengths = np.array([p for _, p in ds.row_provenance])
        expected = np.mean([abs(y - ds.labels[lengths == k].mean()) for y, k in zip(ds.labels, lengths)])
        assert prefix_index_baseline(ds, ds) == pytest.approx(expected)


FAST = TrainConfig(n_trees=150, max_depth=4, min_samples_leaf=20)


class TestHistorySearch:
    def _splits(self, k_star, cumulative=True, n=600):
        return split(synthetic.history_log(n, k_star, cumulative=cumulative, seed=1))

    def test_planted_two_back(self):
        train, val, _ = self._splits(2)
        kpi = KpiSpec.remaining_time()
        h = history_search(train, val, kpi, FAST)
        c = history_search(train, val, kpi, FAST, mode="complete")
        assert h.chosen_history == 2
        assert c.chosen_history != "aggr" and c.chosen_history >= 2
        assert h.validation_score <= 1.01 * c.validation_score

    def test_flat_trail_keeps_last_event(self):
        train, val, _ = self._splits(0)
        h = history_search(train, val, KpiSpec.remaining_time(), FAST)
        assert h.chosen_history == 0
        assert [c for c, _ in h.trail] == [0, 1, 2, "aggr"]

    def test_complete_never_worse(self):
        train, val, _ = self._splits(1, n=300)
        kpi = KpiSpec.remaining_time()
        h = history_search(train, val, kpi, FAST, max_k=4)
        c = history_search(train, val, kpi, FAST, mode="complete", max_k=4)
        assert c.validation_score <= h.validation_score
        assert len(c.trail) == 6
        assert min(s for _, s in c.trail) == c.validation_score

    def test_single_offset_defeats_two_step_rule(self):
        # a lone signal three events back: k=1 and k=2 add nothing, so the heuristic stops early
        train, val, _ = self._splits(3, cumulative=False)
        kpi = KpiSpec.remaining_time()
        h = history_search(train, val, kpi, FAST)
        c = history_search(train, val, kpi, FAST, mode="complete")
        assert h.chosen_history != 3 and c.chosen_history in (3, 4, 5, 6, 7, 8)
        assert 3 not in [k for k, _ in h.trail]


def exact_log(n=60):
    """Two-event cases whose remaining time is exactly 1 or 10 days by ``kind``."""
    traces = []
    for i in range(n):
        kind = "slow" if i % 3 == 0 else "fast"
        start = T0 + timedelta(hours=i)
        end = start + timedelta(days=10 if kind == "slow" else 1)
        traces.append(Trace(f"c{i}", [Event("Open", start, {"kind": kind}), Event("Close", end, {"kind": kind})]))
    return EventLog(traces, {"kind": ValueKind.LITERAL})


class TestGridSearch:
    def test_single_cell(self):
        train, val, _ = split(exact_log())
        cfg, trail = grid_search(train, val, KpiSpec.remaining_time(), 0, FAST, {"n_trees": [7], "max_depth": [2]})
        assert (cfg.n_trees, cfg.max_depth) == (7, 2)
        assert len(trail) == 1

    def test_ties_prefer_small_configs(self):
        train, val, _ = split(exact_log())
        base = TrainConfig(learning_rate=1.0, min_samples_leaf=1)
        grid = {"n_trees": [5, 1, 2], "max_depth": [10, 3, 6]}
        cfg, trail = grid_search(train, val, KpiSpec.remaining_time(), 0, base, grid)
        assert len(trail) == 9
        assert all(s == 0.0 for _, s in trail)
        assert (cfg.n_trees, cfg.max_depth) == (1, 3)


def _write_planted(tmp_path, n=500, **overrides):
    write_csv(synthetic.closure_log(n, seed=5), tmp_path / "log.csv")
    cfg = {"log": "log.csv", "kpi": {"kind": "remaining_time"}, "output_dir": "out",
           "encoding": {"include_full_prefix": False}, "train": {"min_samples_leaf": 10},
           "search": {"grid": {"n_trees": [50, 100], "max_depth": [3]}}}
    cfg.update(overrides)
    (tmp_path / "run.json").write_text(json.dumps(cfg))
    return tmp_path / "run.json"


class TestRunExperiment:
    def test_planted_end_to_end(self, tmp_path):
        result = run_experiment(_write_planted(tmp_path))
        assert result.global_explanations[0]["label"] == "closure_type=slow"
        out = tmp_path / "out"
        for name in ("model.json", "report.json", "explanations.json", "global.json", "cases.json"):
            assert (out / name).exists()
        report = json.loads((out / "report.json").read_text())
        schema = json.loads(resources.files("xppa").joinpath("schemas/report.schema.json").read_text())
        jsonschema.validate(report, schema)
        assert report["test_score"] < 0.05 * report["kpi_average"]
        assert report["n_explained"] == report["n_test_rows"]
        rec = json.loads((out / "explanations.json").read_text())[0]
        total = sum(e["shap"] for e in rec["explanations"])
        assert total == pytest.approx(rec["prediction"] - rec["base_value"], abs=1e-6)

    def test_toml_config(self, tmp_path):
        write_csv(synthetic.closure_log(60, seed=1), tmp_path / "log.csv")
        (tmp_path / "run.toml").write_text(
            'log = "log.csv"\noutput_dir = "o"\n[kpi]\nkind = "remaining_time"\n[search]\nmode = "fixed"\n'
            'history = 1\ngrid_search = false\n[train]\nn_trees = 10\n')
        cfg = load_config(tmp_path / "run.toml")
        assert cfg.log == str(tmp_path / "log.csv")
        result = run_experiment(cfg)
        assert result.report["history_search"]["chosen_history"] == 1
        assert result.report["grid_search"]["chosen"]["n_trees"] == 10

    def test_online_mode(self, tmp_path):
        running = synthetic.closure_log(20, seed=9)
        cut = running.with_traces([Trace(t.case_id, t.events[:2]) for t in running])
        write_csv(cut, tmp_path / "running.csv")
        cfg_path = _write_planted(tmp_path, 200, explain={"mode": "online", "running_log": "running.csv"})
        result = run_experiment(cfg_path)
        assert len(result.explanations) == 20
        assert {r["prefix_length"] for r in result.explanations} == {2}
        assert result.cases[0]["last_activity"] == "Check"

    def test_stage_tagged_errors(self, tmp_path):
        cfg = RunConfig(log=str(tmp_path / "missing.csv"), kpi={"kind": "remaining_time"})
        with pytest.raises(PipelineError) as info:
            run_experiment(cfg, write=False)
        assert info.value.stage == "load"
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"log": "x.csv", "kpi": {}, "bogus": 1})

    def test_unknown_kpi_target(self, tmp_path):
        path = _write_planted(tmp_path, 30, kpi={"kind": "trace_level_attribute", "target": "nope"})
        with pytest.raises(PipelineError, match=r"\[load\]"):
            run_experiment(path)
