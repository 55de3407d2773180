"""Experiment orchestration: splits, scoring, history/grid search and full runs."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import gbdt
from .encoding import EncodedDataset, Encoder, EncoderConfig, prepare
from .event_log import CsvConfig, EventLog, MISSING, Trace, log_statistics, parse_csv, read_xes
from .gbdt import GbdtModel, TrainConfig
from .kpi import KpiKind, KpiSpec
from .shapley import (
    Explanation,
    PayoutConfig,
    ShapleyVector,
    aggregate_global,
    explain_rows,
    fit_discretizers,
    label_explanations,
    rescale_boolean,
)

log = logging.getLogger(__name__)

DESK_GRID = {"n_trees": [100, 300, 600], "max_depth": [3, 6, 10]}
LARGE_GRID = {"n_trees": [1500, 3000, 4000], "max_depth": [3, 6, 10]}
SECONDS_PER_DAY = 86400.0


class PipelineError(RuntimeError):
    """A stage of an experiment failed; ``stage`` names it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 2 / 3
    validation_fraction: float = 0.2
    strategy: str = "chronological"
    seed: int = 0

    def __post_init__(self):
        for name in ("train_fraction", "validation_fraction"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ConfigError(f"{name} must lie in (0, 1), got {v}")
        if self.strategy not in ("chronological", "random"):
            raise ConfigError(f"unknown split strategy {self.strategy!r}")

    def to_dict(self) -> dict:
        return {"train_fraction": self.train_fraction, "validation_fraction": self.validation_fraction,
                "strategy": self.strategy, "seed": self.seed}


def split(log_: EventLog, spec: SplitSpec = SplitSpec()) -> tuple[EventLog, EventLog, EventLog]:
    """Partition traces into train, validation and test logs.

    The train pool gets ``ceil(train_fraction * n)`` traces and the rest is
    test; the validation log is the ``floor(validation_fraction * pool)``
    (at least one) last traces of the pool. Chronological splits order
    traces by their first event, so test cases start last.
    """
    traces = list(log_.traces)
    n = len(traces)
    if n < 3:
        raise ConfigError(f"need at least 3 traces to split, got {n}")
    if spec.strategy == "chronological":
        traces.sort(key=lambda t: t.start)
    else:
        perm = np.random.default_rng(spec.seed).permutation(n)
        traces = [traces[i] for i in perm]
    n_pool = min(n - 1, math.ceil(spec.train_fraction * n - 1e-9))
    n_val = min(n_pool - 1, max(1, math.floor(spec.validation_fraction * n_pool + 1e-9)))
    pool, test = traces[:n_pool], traces[n_pool:]
    train, val = pool[:n_pool - n_val], pool[n_pool - n_val:]
    return log_.with_traces(train), log_.with_traces(val), log_.with_traces(test)


def mae(y_true, y_pred) -> float:
    y_true, y_pred = np.asarray(y_true, float), np.asarray(y_pred, float)
    if len(y_true) == 0:
        raise ValueError("cannot score an empty dataset")
    return float(np.mean(np.abs(y_true - y_pred)))


def f1(y_true, y_pred) -> float:
    """F1 of the positive class; 0 when there are no true or predicted positives."""
    t = np.asarray(y_true).astype(bool)
    p = np.asarray(y_pred).astype(bool)
    if len(t) == 0:
        raise ValueError("cannot score an empty dataset")
    tp = np.sum(t & p)
    fp = np.sum(~t & p)
    fn = np.sum(t & ~p)
    if tp == 0:
        return 0.0
    return float(2 * tp / (2 * tp + fp + fn))


def score_predictions(y_true, pred, kind: str) -> float:
    if kind == "boolean":
        return f1(y_true, np.asarray(pred) >= 0.5)
    return mae(y_true, pred)


def score(model: GbdtModel, dataset: EncodedDataset, n_trees: int | None = None) -> float:
    """MAE for numeric KPIs, F1 at threshold 0.5 for boolean ones (label units)."""
    if len(dataset) == 0:
        raise ValueError("cannot score an empty dataset")
    return score_predictions(dataset.labels, model.predict(dataset.rows, n_trees), dataset.label_kind)


def improves(new: float, best: float, kind: str, margin: float = 0.01) -> bool:
    """True when ``new`` beats ``best`` by at least ``margin`` relative."""
    if kind == "boolean":
        return new > best and (best <= 0 or (new - best) / best >= margin)
    return new < best and (best <= 0 or (best - new) / best >= margin)


def better(new: float, best: float, kind: str) -> bool:
    return new > best if kind == "boolean" else new < best


@dataclass
class SearchResult:
    chosen_history: int | str
    chosen_config: TrainConfig
    validation_score: float
    trail: list[tuple[Any, float]]
    mode: str = "heuristic"

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "chosen_history": self.chosen_history,
            "chosen_config": self.chosen_config.to_dict(),
            "validation_score": None if math.isnan(self.validation_score) else self.validation_score,
            "trail": [{"config": c, "score": s} for c, s in self.trail],
        }


def _encoder_config(history, base: EncoderConfig) -> EncoderConfig:
    return EncoderConfig.with_history(history, time_from_start=base.time_from_start, weekday=base.weekday,
                                      running_cost=base.running_cost, exclude=base.exclude)


def encode_pair(train_log: EventLog, other: EventLog, kpi: KpiSpec, enc_cfg: EncoderConfig,
                include_full_prefix: bool = True) -> tuple[Encoder, EncodedDataset, EncodedDataset]:
    train_log = prepare(train_log, enc_cfg)
    other = prepare(other, enc_cfg)
    enc = Encoder.fit(train_log, enc_cfg)
    return (enc, enc.build_dataset(train_log, kpi, include_full_prefix),
            enc.build_dataset(other, kpi, include_full_prefix))


def evaluate_history(train_log, val_log, kpi, history, cfg: TrainConfig,
                     base_enc: EncoderConfig = EncoderConfig(), include_full_prefix: bool = True) -> float:
    enc_cfg = _encoder_config(history, base_enc)
    _, tr, va = encode_pair(train_log, val_log, kpi, enc_cfg, include_full_prefix)
    if len(va) == 0:
        raise ConfigError("validation split has no labelled prefixes")
    model = gbdt.train(tr, cfg)
    return score(model, va)


def history_search(train_log: EventLog, val_log: EventLog, kpi: KpiSpec, base_cfg: TrainConfig,
                   mode: str = "heuristic", max_k: int | None = None,
                   base_enc: EncoderConfig = EncoderConfig(), include_full_prefix: bool = True) -> SearchResult:
    """Choose how much trace history the encoder should carry.

    History lengths k = 0, 1, 2, ... up to ``max_k`` (default: the mean
    trace length of the training log) are tried in turn. A step counts as an
    improvement only if it beats the incumbent by at least 1% relative; the
    heuristic stops after two consecutive non-improving steps. The
    aggregated encoding is always evaluated once and competes under the same
    rule. ``mode="complete"`` evaluates every candidate and keeps the best
    score outright.
    """
    if mode not in ("heuristic", "complete"):
        raise ConfigError(f"unknown search mode {mode!r}")
    if len(val_log) == 0:
        raise ConfigError("validation split is empty")
    if max_k is None:
        max_k = int(round(log_statistics(train_log).mean_events_per_trace))
    kind = kpi.value_kind
    trail: list[tuple[Any, float]] = []

    def run(history):
        s = evaluate_history(train_log, val_log, kpi, history, base_cfg, base_enc, include_full_prefix)
        trail.append((history, s))
        log.info("history %s: validation score %.6g", history, s)
        return s

    best_h, best_s = 0, run(0)
    strikes = 0
    for k in range(1, max_k + 1):
        s = run(k)
        if mode == "complete":
            if better(s, best_s, kind):
                best_h, best_s = k, s
            continue
        if improves(s, best_s, kind):
            best_h, best_s, strikes = k, s, 0
        else:
            strikes += 1
            if strikes == 2:
                break
    s = run("aggr")
    if (mode == "complete" and better(s, best_s, kind)) or (mode == "heuristic" and improves(s, best_s, kind)):
        best_h, best_s = "aggr", s
    return SearchResult(best_h, base_cfg, best_s, trail, mode)


def grid_search(train_log: EventLog, val_log: EventLog, kpi: KpiSpec, history, base_cfg: TrainConfig = TrainConfig(),
                grid: dict | None = None, base_enc: EncoderConfig = EncoderConfig(),
                include_full_prefix: bool = True) -> tuple[TrainConfig, list[tuple[dict, float]]]:
    """Pick tree count and depth on the validation split.

    One ensemble per depth is boosted to the largest tree count and scored
    at every smaller count from its leading trees, which is identical to
    training each cell separately. Ties go to fewer trees, then smaller depth.
    """
    grid = grid or DESK_GRID
    trees = sorted(set(int(t) for t in grid["n_trees"]))
    depths = sorted(set(int(d) for d in grid["max_depth"]))
    if not trees or not depths:
        raise ConfigError("empty hyperparameter grid")
    enc_cfg = _encoder_config(history, base_enc)
    _, tr, va = encode_pair(train_log, val_log, kpi, enc_cfg, include_full_prefix)
    scores: dict[tuple[int, int], float] = {}
    for d in depths:
        model = gbdt.train(tr, replace(base_cfg, n_trees=max(trees), max_depth=d))
        for t in trees:
            scores[(t, d)] = score(model, va, n_trees=t)
    trail = []
    best = None
    for t in trees:
        for d in depths:
            s = scores[(t, d)]
            trail.append(({"n_trees": t, "max_depth": d}, s))
            if best is None or better(s, best[1], kpi.value_kind):
                best = ((t, d), s)
    (t, d), _ = best
    return replace(base_cfg, n_trees=t, max_depth=d), trail


def prefix_index_baseline(train: EncodedDataset, test: EncodedDataset) -> float:
    """MAE of predicting the mean training label of the same prefix length."""
    lengths = np.array([p for _, p in train.row_provenance])
    means = {int(k): float(train.labels[lengths == k].mean()) for k in np.unique(lengths)}
    overall = float(train.labels.mean())
    pred = [means.get(p, overall) for _, p in test.row_provenance]
    return mae(test.labels, pred)


# ----------------------------------------------------------------------------- run configuration


@dataclass
class RunConfig:
    log: str
    kpi: dict
    output_dir: str = "out"
    columns: dict = field(default_factory=dict)
    log_format: str | None = None
    encoding: dict = field(default_factory=dict)
    split: dict = field(default_factory=dict)
    search: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    explain: dict = field(default_factory=dict)
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict, base_dir: str | os.PathLike | None = None) -> "RunConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        if "log" not in d or "kpi" not in d:
            raise ConfigError("config needs 'log' and 'kpi'")
        cfg = cls(**d)
        if base_dir is not None:
            cfg.log = _resolve(base_dir, cfg.log)
            cfg.output_dir = _resolve(base_dir, cfg.output_dir)
            if cfg.explain.get("running_log"):
                cfg.explain = dict(cfg.explain, running_log=_resolve(base_dir, cfg.explain["running_log"]))
        return cfg

    def to_dict(self) -> dict:
        return {
            "log": os.path.basename(self.log),
            "kpi": self.kpi,
            "columns": self.columns,
            "log_format": self.log_format,
            "encoding": self.encoding,
            "split": self.split,
            "search": self.search,
            "train": self.train,
            "explain": {k: (os.path.basename(v) if k == "running_log" and v else v) for k, v in self.explain.items()},
            "seed": self.seed,
        }

    @property
    def csv_config(self) -> CsvConfig:
        c = self.columns
        return CsvConfig(c.get("case", "case_id"), c.get("activity", "activity"), c.get("timestamp", "timestamp"),
                         c.get("time_format"))

    @property
    def split_spec(self) -> SplitSpec:
        s = dict(self.split)
        s.setdefault("seed", self.seed)
        return SplitSpec(**s)

    @property
    def base_encoder(self) -> EncoderConfig:
        e = self.encoding
        return EncoderConfig(time_from_start=e.get("time_from_start", False), weekday=e.get("weekday", False),
                             running_cost=e.get("running_cost"), exclude=tuple(e.get("exclude", ())))

    @property
    def include_full_prefix(self) -> bool:
        return bool(self.encoding.get("include_full_prefix", True))

    @property
    def train_config(self) -> TrainConfig:
        t = dict(self.train)
        t.setdefault("seed", self.seed)
        return TrainConfig(**t)

    @property
    def grid(self) -> dict:
        g = self.search.get("grid")
        if g:
            return g
        return LARGE_GRID if self.search.get("large_grid") else DESK_GRID


def _resolve(base_dir, path):
    return path if os.path.isabs(path) else os.path.normpath(os.path.join(base_dir, path))


def load_config(path: str | os.PathLike) -> RunConfig:
    """Read a run configuration from JSON or TOML; paths resolve against its folder."""
    path = Path(path)
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        with open(path, "rb") as fh:
            d = tomllib.load(fh)
    else:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
    return RunConfig.from_dict(d, path.parent)


def load_log(path: str, cfg: RunConfig) -> EventLog:
    fmt = cfg.log_format or ("xes" if str(path).lower().endswith((".xes", ".xml")) else "csv")
    if fmt == "xes":
        return read_xes(path)
    return parse_csv(path, cfg.csv_config)


def kpi_from_config(cfg: RunConfig, log_: EventLog) -> KpiSpec:
    k = cfg.kpi
    return KpiSpec.for_log(k["kind"], log_, k.get("target") or k.get("activity") or k.get("attribute"))


# ----------------------------------------------------------------------------- display units


def kpi_unit(kpi: KpiSpec) -> str:
    if kpi.kind is KpiKind.REMAINING_TIME:
        return "days"
    if kpi.is_boolean:
        return "signed_probability"
    return "kpi"


def to_display(vector: ShapleyVector, kpi: KpiSpec) -> ShapleyVector:
    """Days for remaining time, [-1, +1] for boolean KPIs, raw units otherwise."""
    if kpi.kind is KpiKind.REMAINING_TIME:
        f = 1.0 / SECONDS_PER_DAY
        return replace(vector, values=vector.values * f, base_value=vector.base_value * f,
                       prediction=vector.prediction * f, scale="days")
    if kpi.is_boolean:
        return rescale_boolean(replace(vector, scale="probability"))
    return vector


def display_value(x: float, kpi: KpiSpec) -> float:
    if kpi.kind is KpiKind.REMAINING_TIME:
        return x / SECONDS_PER_DAY
    if kpi.is_boolean:
        return 2.0 * x - 1.0
    return x


def score_display(s: float, kpi: KpiSpec) -> float:
    return s / SECONDS_PER_DAY if kpi.kind is KpiKind.REMAINING_TIME else s


def current_value(kpi: KpiSpec, prefix: Trace):
    """What is already known of the KPI for a running case, in display units."""
    if kpi.kind is KpiKind.REMAINING_TIME:
        return prefix.duration.total_seconds() / SECONDS_PER_DAY
    if kpi.kind in (KpiKind.RUNNING_TOTAL, KpiKind.TRACE_ATTRIBUTE):
        v = prefix.events[-1].get(kpi.target)
        if v is MISSING or isinstance(v, bool):
            return None
        return float(v)
    return None


# ----------------------------------------------------------------------------- explanation


@dataclass
class Explainer:
    """Everything needed to explain predictions of a trained model."""

    model: GbdtModel
    encoder: Encoder
    kpi: KpiSpec
    payout: PayoutConfig
    discretizers: dict[int, np.ndarray]
    n_permutations: int = 200
    exact_threshold: int = 12
    seed: int = 0

    @classmethod
    def build(cls, model: GbdtModel, encoder: Encoder, kpi: KpiSpec, train: EncodedDataset,
              background_size: int = 100, max_buckets: int = 4, seed: int = 0, **kw) -> "Explainer":
        payout = PayoutConfig.from_rows(train.rows, background_size, seed)
        min_leaf = max(1, len(train) // 100)
        disc = fit_discretizers(train.rows, train.labels, train.descriptors, max_buckets, min_leaf)
        return cls(model, encoder, kpi, payout, disc, seed=seed, **kw)

    def explain(self, rows: np.ndarray, provenance: Sequence[tuple[str, int]]) -> list[dict]:
        vectors = explain_rows(self.model.predict, rows, self.payout, provenance,
                               features=self.model.used_features, exact_threshold=self.exact_threshold,
                               n_permutations=self.n_permutations, seed=self.seed)
        out = []
        for v, row in zip(vectors, rows):
            shown = to_display(v, self.kpi)
            expl = label_explanations(shown, row, self.model.descriptors, self.discretizers)
            out.append({
                "case_id": v.provenance[0],
                "prefix_length": int(v.provenance[1]),
                "base_value": shown.base_value,
                "prediction": shown.prediction,
                "explanations": [{"label": e.label, "shap": e.shapley_value, "derived": e.derived} for e in expl],
            })
        return out


def _explanation_objects(records: list[dict]):
    return [[Explanation(e["label"], e["shap"], -1, e.get("derived", False)) for e in r["explanations"]]
            for r in records]


def global_from_records(records: list[dict], sort_key: str = "mean") -> list[dict]:
    return [g.to_dict() for g in aggregate_global(_explanation_objects(records), sort_key)]


def online_rows(encoder: Encoder, running: EventLog) -> tuple[np.ndarray, list[tuple[str, int]]]:
    """Encoded last prefix of every running case."""
    running = prepare(running, encoder.config)
    rows = [encoder.encode_trace(t)[-1] for t in running.traces]
    prov = [(t.case_id, len(t)) for t in running.traces]
    return (np.vstack(rows) if rows else np.empty((0, encoder.width))), prov


# ----------------------------------------------------------------------------- full experiment


@dataclass
class ExperimentReport:
    report: dict
    model: GbdtModel
    explanations: list[dict]
    global_explanations: list[dict]
    cases: list[dict]

    def write(self, output_dir: str | os.PathLike) -> None:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.model.save(out / "model.json")
        dump_json(out / "report.json", self.report)
        dump_json(out / "explanations.json", self.explanations)
        dump_json(out / "global.json", self.global_explanations)
        dump_json(out / "cases.json", self.cases)


def dump_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, ensure_ascii=False)
        fh.write("\n")


def _stage(name):
    def deco(fn):
        def wrapper(*a, **kw):
            try:
                return fn(*a, **kw)
            except PipelineError:
                raise
            except Exception as exc:
                raise PipelineError(name, f"{type(exc).__name__}: {exc}") from exc
        return wrapper
    return deco


@_stage("load")
def _load(cfg: RunConfig):
    log_ = load_log(cfg.log, cfg)
    kpi = kpi_from_config(cfg, log_)
    enc = cfg.base_encoder
    return prepare(log_, enc), kpi


@_stage("split")
def _split(log_, cfg):
    return split(log_, cfg.split_spec)


@_stage("history_search")
def _history(train, val, kpi, cfg: RunConfig) -> SearchResult:
    mode = cfg.search.get("mode", "heuristic")
    if mode == "fixed":
        h = cfg.search.get("history", 0)
        return SearchResult(h, cfg.train_config, float("nan"), [], "fixed")
    return history_search(train, val, kpi, cfg.train_config, mode, cfg.search.get("max_k"),
                          cfg.base_encoder, cfg.include_full_prefix)


@_stage("grid_search")
def _grid(train, val, kpi, history, cfg: RunConfig):
    if not cfg.search.get("grid_search", True):
        return cfg.train_config, []
    return grid_search(train, val, kpi, history, cfg.train_config, cfg.grid, cfg.base_encoder,
                       cfg.include_full_prefix)


def final_model(train: EventLog, val: EventLog, kpi: KpiSpec, enc_cfg: EncoderConfig, tcfg: TrainConfig,
                include_full_prefix: bool = True, metadata: dict | None = None):
    pool = train.with_traces(train.traces + val.traces)
    pool = prepare(pool, enc_cfg)
    encoder = Encoder.fit(pool, enc_cfg)
    ds = encoder.build_dataset(pool, kpi, include_full_prefix)
    model = gbdt.train(ds, tcfg, enc_cfg, metadata)
    return model, encoder, ds


@dataclass
class Context:
    """A loaded log with its KPI and the deterministic three-way split."""

    config: RunConfig
    log: EventLog
    kpi: KpiSpec
    train: EventLog
    validation: EventLog
    test: EventLog

    @classmethod
    def load(cls, cfg: RunConfig) -> "Context":
        log_, kpi = _load(cfg)
        train, val, test = _split(log_, cfg)
        log.info("split: %d train / %d validation / %d test traces", len(train), len(val), len(test))
        return cls(cfg, log_, kpi, train, val, test)

    @property
    def pool(self) -> EventLog:
        return self.train.with_traces(self.train.traces + self.validation.traces)


@dataclass
class Fitted:
    model: GbdtModel
    encoder: Encoder
    train_ds: EncodedDataset
    search: SearchResult | None = None
    grid_trail: list = field(default_factory=list)

    @property
    def kpi_average(self) -> float:
        """Mean training label, the reference for "expected vs average"."""
        return float(self.train_ds.labels.mean())


def fit_stage(ctx: Context) -> Fitted:
    """History search, grid search and the final fit on train + validation."""
    cfg = ctx.config
    search = _history(ctx.train, ctx.validation, ctx.kpi, cfg)
    enc_cfg = _encoder_config(search.chosen_history, cfg.base_encoder)
    tcfg, grid_trail = _grid(ctx.train, ctx.validation, ctx.kpi, search.chosen_history, cfg)
    search = replace(search, chosen_config=tcfg)
    metadata = {"kpi": ctx.kpi.to_dict(), "activity_key": ctx.log.activity_key,
                "include_full_prefix": cfg.include_full_prefix}
    try:
        model, encoder, train_ds = final_model(ctx.train, ctx.validation, ctx.kpi, enc_cfg, tcfg,
                                               cfg.include_full_prefix, metadata)
    except Exception as exc:
        raise PipelineError("train", f"{type(exc).__name__}: {exc}") from exc
    return Fitted(model, encoder, train_ds, search, grid_trail)


def restore(ctx: Context, model: GbdtModel) -> Fitted:
    """Rebuild the encoder and training rows that belong to a saved model."""
    try:
        if model.encoder_config is None:
            raise ValueError("model carries no encoder configuration")
        saved_kpi = model.metadata.get("kpi")
        if saved_kpi is not None and KpiSpec.from_dict(saved_kpi) != ctx.kpi:
            raise ValueError(f"model was trained for KPI {saved_kpi}, config asks for {ctx.kpi.to_dict()}")
        encoder = Encoder.from_descriptors(model.descriptors, model.encoder_config, ctx.log.activity_key)
        pool = prepare(ctx.pool, model.encoder_config)
        train_ds = encoder.build_dataset(pool, ctx.kpi, ctx.config.include_full_prefix)
    except Exception as exc:
        raise PipelineError("load_model", f"{type(exc).__name__}: {exc}") from exc
    return Fitted(model, encoder, train_ds)


@dataclass
class Evaluation:
    test_ds: EncodedDataset
    test_score: float
    baseline: float | None

    def to_dict(self, kpi: KpiSpec) -> dict:
        return {"metric": "f1" if kpi.is_boolean else "mae",
                "test_score": score_display(self.test_score, kpi),
                "baseline_score": None if self.baseline is None else score_display(self.baseline, kpi),
                "n_test_rows": len(self.test_ds)}


def evaluate_stage(ctx: Context, fitted: Fitted) -> Evaluation:
    try:
        enc_cfg = fitted.encoder.config
        test_ds = fitted.encoder.build_dataset(prepare(ctx.test, enc_cfg), ctx.kpi, ctx.config.include_full_prefix)
        test_score = score(fitted.model, test_ds)
        baseline = None if ctx.kpi.is_boolean else prefix_index_baseline(fitted.train_ds, test_ds)
    except Exception as exc:
        raise PipelineError("evaluate", f"{type(exc).__name__}: {exc}") from exc
    return Evaluation(test_ds, test_score, baseline)


def make_explainer(ctx: Context, fitted: Fitted) -> Explainer:
    ex = ctx.config.explain
    return Explainer.build(fitted.model, fitted.encoder, ctx.kpi, fitted.train_ds, ex.get("background_size", 100),
                           ex.get("max_buckets", 4), ctx.config.seed,
                           n_permutations=ex.get("n_permutations", 200),
                           exact_threshold=ex.get("exact_threshold", 12))


def explain_stage(ctx: Context, fitted: Fitted, test_ds: EncodedDataset | None = None):
    """Explain every test prefix (offline) or the last prefix of each running case (online).

    Returns ``(records, globals, cases)`` in display units.
    """
    ex = ctx.config.explain
    try:
        explainer = make_explainer(ctx, fitted)
        if ex.get("mode", "offline") == "online":
            if not ex.get("running_log"):
                raise ConfigError("online mode needs explain.running_log")
            source = load_log(ex["running_log"], ctx.config)
            rows, prov = online_rows(fitted.encoder, source)
        else:
            if test_ds is None:
                test_ds = fitted.encoder.build_dataset(prepare(ctx.test, fitted.encoder.config), ctx.kpi,
                                                       ctx.config.include_full_prefix)
            rows, prov = test_ds.rows, test_ds.row_provenance
            source = ctx.test
        records = explainer.explain(rows, prov)
        globals_ = global_from_records(records, ex.get("sort", "mean"))
        cases = case_summaries(records, source, ctx.kpi, display_value(fitted.kpi_average, ctx.kpi))
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError("explain", f"{type(exc).__name__}: {exc}") from exc
    return records, globals_, cases


def search_summary(fitted: Fitted, kpi: KpiSpec) -> dict:
    """History and grid search trails with scores in display units."""
    h = fitted.search.to_dict()
    if h["validation_score"] is not None:
        h["validation_score"] = score_display(h["validation_score"], kpi)
    h["trail"] = [{"config": t["config"], "score": score_display(t["score"], kpi)} for t in h["trail"]]
    return {
        "history_search": h,
        "grid_search": {"chosen": fitted.search.chosen_config.to_dict(),
                        "trail": [{"config": c, "score": score_display(s, kpi)} for c, s in fitted.grid_trail]},
    }


def run_experiment(cfg: RunConfig | str | os.PathLike, write: bool = True) -> ExperimentReport:
    """Split, search, train, test, explain and aggregate, then write the artifacts.

    Artifacts (``model.json``, ``report.json``, ``explanations.json``,
    ``global.json``, ``cases.json``) go to ``cfg.output_dir``; the static
    HTML/SVG report is rendered by :mod:`xppa.report`.
    """
    if not isinstance(cfg, RunConfig):
        cfg = load_config(cfg)
    ctx = Context.load(cfg)
    fitted = fit_stage(ctx)
    ev = evaluate_stage(ctx, fitted)
    records, globals_, cases = explain_stage(ctx, fitted, ev.test_ds)
    kpi = ctx.kpi
    report = {
        "config": cfg.to_dict(),
        "kpi": kpi.to_dict(),
        "unit": kpi_unit(kpi),
        "log_stats": log_statistics(ctx.log).as_dict(),
        "split": {**cfg.split_spec.to_dict(), "n_train": len(ctx.train), "n_validation": len(ctx.validation),
                  "n_test": len(ctx.test)},
        **search_summary(fitted, kpi),
        "encoder_config": fitted.encoder.config.to_dict(),
        **ev.to_dict(kpi),
        "kpi_average": display_value(fitted.kpi_average, kpi),
        "n_train_rows": len(fitted.train_ds),
        "n_explained": len(records),
        "explain_mode": cfg.explain.get("mode", "offline"),
        "n_trees_fitted": len(fitted.model.trees),
        "warnings": sorted(set(fitted.train_ds.warnings + ev.test_ds.warnings))[:50],
    }
    result = ExperimentReport(report, fitted.model, records, globals_, cases)
    if write:
        result.write(cfg.output_dir)
    return result


def case_summaries(records: list[dict], source: EventLog, kpi: KpiSpec, kpi_average: float) -> list[dict]:
    """One panel per case from its latest explained prefix."""
    latest: dict[str, dict] = {}
    for r in records:
        cur = latest.get(r["case_id"])
        if cur is None or r["prefix_length"] > cur["prefix_length"]:
            latest[r["case_id"]] = r
    out = []
    for cid in sorted(latest):
        r = latest[cid]
        prefix = Trace(cid, source.trace(cid).events[:r["prefix_length"]])
        out.append({
            "case_id": cid,
            "prefix_length": r["prefix_length"],
            "last_activity": prefix.events[-1].activity,
            "current_value": current_value(kpi, prefix),
            "prediction": r["prediction"],
            "base_value": r["base_value"],
            "kpi_average": kpi_average,
            "delta_vs_average": r["prediction"] - kpi_average,
            "shap_total": float(sum(e["shap"] for e in r["explanations"])),
            "explanations": r["explanations"],
        })
    return out
