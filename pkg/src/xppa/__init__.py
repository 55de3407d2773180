"""Explainable KPI prediction for business-process event logs.

Event logs are turned into prefix datasets, a gradient-boosted tree model
predicts the KPI of running cases, and Shapley values explain each
prediction in terms of attribute values, grouped into buckets and
aggregated into global explanations.
"""

from .encoding import EncodedDataset, Encoder, EncoderConfig, FeatureDescriptor, build_dataset, enrich
from .event_log import CsvConfig, Event, EventLog, Trace, log_statistics, parse_csv, prefixes, read_xes, write_csv
from .gbdt import GbdtModel, TrainConfig, fit, train
from .kpi import KpiKind, KpiSpec, kpi_value, trace_labels
from .pipeline import RunConfig, SplitSpec, grid_search, history_search, load_config, run_experiment, score, split
from .shapley import (
    PayoutConfig,
    ShapleyVector,
    aggregate_global,
    exact_shapley,
    explain_rows,
    fit_discretizer,
    rescale_boolean,
    sampled_shapley,
)

__version__ = "0.1.0"

__all__ = [
    "CsvConfig", "EncodedDataset", "Encoder", "EncoderConfig", "Event", "EventLog", "FeatureDescriptor",
    "GbdtModel", "KpiKind", "KpiSpec", "PayoutConfig", "RunConfig", "ShapleyVector", "SplitSpec", "Trace",
    "TrainConfig", "aggregate_global", "build_dataset", "enrich", "exact_shapley", "explain_rows", "fit",
    "fit_discretizer", "grid_search", "history_search", "kpi_value", "load_config", "log_statistics",
    "parse_csv", "prefixes", "read_xes", "rescale_boolean", "run_experiment", "sampled_shapley", "score",
    "split", "trace_labels", "train", "write_csv",
]
