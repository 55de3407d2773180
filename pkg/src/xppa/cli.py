"""Command-line entry point: ``xppa <subcommand> --config run.json``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import report as report_mod
from .event_log import EventLogError, log_statistics
from .gbdt import GbdtModel
from .pipeline import (
    ConfigError,
    Context,
    ExperimentReport,
    PipelineError,
    RunConfig,
    dump_json,
    display_value,
    evaluate_stage,
    explain_stage,
    fit_stage,
    kpi_unit,
    load_config,
    load_log,
    make_explainer,
    online_rows,
    case_summaries,
    restore,
    run_experiment,
    search_summary,
)


class CliError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration (JSON or TOML)")
    common.add_argument("--log", help="event log path; overrides the config")
    common.add_argument("--case-col")
    common.add_argument("--activity-col")
    common.add_argument("--time-col")
    common.add_argument("--time-format", help="strftime pattern of the timestamp column")
    common.add_argument("--output", help="output directory; overrides the config")
    common.add_argument("--sort", choices=["mean", "median"], default="mean")
    common.add_argument("--filter-label", help="keep only explanation labels containing this text")
    common.add_argument("--top", type=int, default=report_mod.TOP_N, help="number of bars per chart")
    common.add_argument("--mode", choices=["offline", "online"], help="explain test prefixes or running cases")
    common.add_argument("--running-log", help="log of incomplete cases for online mode")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="xppa", description="Explainable KPI prediction over event logs.")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")
    sub.add_parser("stats", parents=[common], help="print event-log statistics")
    sub.add_parser("train", parents=[common], help="search history and grid, fit and save model.json")
    sub.add_parser("evaluate", parents=[common], help="score the saved model on the test split")
    sub.add_parser("explain-global", parents=[common], help="explain test prefixes and aggregate")
    case = sub.add_parser("explain-case", parents=[common], help="explain the latest prefix of one case")
    case.add_argument("case_id")
    case.add_argument("--prefix-length", type=int, help="explain this many events instead of all")
    sub.add_parser("report", parents=[common], help="render report/ from the JSON artifacts")
    sub.add_parser("run", parents=[common], help="full experiment plus report")
    return p


def _config(args) -> RunConfig:
    if args.config:
        try:
            cfg = load_config(args.config)
        except (OSError, ValueError) as exc:
            raise CliError("config", str(exc)) from exc
    elif args.log:
        cfg = RunConfig(log=args.log, kpi={"kind": "remaining_time"})
    else:
        raise CliError("config", "give --config or --log")
    if args.log:
        cfg.log = args.log
    cols = dict(cfg.columns)
    for key, val in (("case", args.case_col), ("activity", args.activity_col), ("timestamp", args.time_col),
                     ("time_format", args.time_format)):
        if val is not None:
            cols[key] = val
    cfg.columns = cols
    if args.output:
        cfg.output_dir = args.output
    explain = dict(cfg.explain, sort=args.sort)
    if args.mode:
        explain["mode"] = args.mode
    if args.running_log:
        explain["running_log"] = args.running_log
    cfg.explain = explain
    return cfg


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _saved(ctx: Context):
    path = Path(ctx.config.output_dir) / "model.json"
    if not path.exists():
        raise CliError("load_model", f"no model at {path}; run `xppa train` first")
    return restore(ctx, GbdtModel.load(path))


def cmd_stats(args, cfg: RunConfig) -> None:
    try:
        log_ = load_log(cfg.log, cfg)
    except (OSError, EventLogError) as exc:
        raise CliError("load", str(exc)) from exc
    for k, v in log_statistics(log_).as_dict().items():
        print(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}")


def cmd_train(args, cfg: RunConfig) -> None:
    ctx = Context.load(cfg)
    fitted = fit_stage(ctx)
    out = _out(cfg)
    fitted.model.save(out / "model.json")
    dump_json(out / "search.json", search_summary(fitted, ctx.kpi))
    print(f"history={fitted.search.chosen_history} n_trees={fitted.search.chosen_config.n_trees} "
          f"max_depth={fitted.search.chosen_config.max_depth}")
    print(f"model written to {out / 'model.json'}")


def cmd_evaluate(args, cfg: RunConfig) -> None:
    ctx = Context.load(cfg)
    ev = evaluate_stage(ctx, _saved(ctx))
    d = ev.to_dict(ctx.kpi)
    dump_json(_out(cfg) / "evaluation.json", d)
    for k, v in d.items():
        print(f"{k}={v}")


def cmd_explain_global(args, cfg: RunConfig) -> None:
    ctx = Context.load(cfg)
    fitted = _saved(ctx)
    records, globals_, cases = explain_stage(ctx, fitted)
    out = _out(cfg)
    dump_json(out / "explanations.json", records)
    dump_json(out / "global.json", globals_)
    dump_json(out / "cases.json", cases)
    for g in report_mod.select_globals(globals_, args.sort, args.filter_label, args.top):
        print(f"{g[args.sort]:+12.4f}  n={g['count']:<6d} {g['label']}")


def cmd_explain_case(args, cfg: RunConfig) -> None:
    ctx = Context.load(cfg)
    source = ctx.log
    if cfg.explain.get("mode") == "online" and cfg.explain.get("running_log"):
        source = load_log(cfg.explain["running_log"], cfg)
    if args.case_id not in source:
        raise CliError("explain", f"case not found: {args.case_id}")
    trace = source.trace(args.case_id)
    n = args.prefix_length or len(trace)
    if not 1 <= n <= len(trace):
        raise CliError("explain", f"prefix length {n} outside 1..{len(trace)}")
    fitted = _saved(ctx)
    one = source.with_traces([replace(trace, events=trace.events[:n])])
    rows, prov = online_rows(fitted.encoder, one)
    records = make_explainer(ctx, fitted).explain(rows, prov)
    case = case_summaries(records, one, ctx.kpi, display_value(fitted.kpi_average, ctx.kpi))[0]
    out = _out(cfg)
    dump_json(out / f"case_{report_mod.case_filename(args.case_id)[:-5]}.json", case)
    bundle = report_mod.ReportBundle({}, [], [case], kpi_unit(ctx.kpi))
    cases_dir = out / "report" / "cases"
    cases_dir.mkdir(parents=True, exist_ok=True)
    (cases_dir / report_mod.case_filename(args.case_id)).write_text(
        report_mod.page(f"Case {args.case_id}", report_mod.render_case_panel(case, bundle, args.top)),
        encoding="utf-8")
    print(f"case={case['case_id']} events={case['prefix_length']} last_activity={case['last_activity']}")
    print(f"prediction={case['prediction']:.4f} base={case['base_value']:.4f} "
          f"{report_mod.delta_text(case['delta_vs_average'])}")
    shown = [e for e in case["explanations"] if args.filter_label is None or args.filter_label in e["label"]]
    for e in sorted(shown, key=lambda e: (-abs(e["shap"]), e["label"]))[:args.top]:
        print(f"{e['shap']:+12.4f}  {e['label']}")


def cmd_report(args, cfg: RunConfig) -> None:
    out = Path(cfg.output_dir)
    if not (out / "report.json").exists() or not (out / "global.json").exists():
        raise CliError("report", f"no run artifacts in {out}; run `xppa run` first")
    index = report_mod.write_report(out, args.sort, args.filter_label, args.top)
    print(f"report written to {index}")


def cmd_run(args, cfg: RunConfig) -> None:
    result: ExperimentReport = run_experiment(cfg)
    index = report_mod.write_report(cfg.output_dir, args.sort, args.filter_label, args.top)
    r = result.report
    print(f"{r['metric']}={r['test_score']:.4f} baseline={r['baseline_score']} "
          f"history={r['history_search']['chosen_history']}")
    top = result.global_explanations[0] if result.global_explanations else None
    if top:
        print(f"top label: {top['label']} ({top['mean']:+.4f})")
    print(f"report written to {index}")


COMMANDS = {
    "stats": cmd_stats,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "explain-global": cmd_explain_global,
    "explain-case": cmd_explain_case,
    "report": cmd_report,
    "run": cmd_run,
}


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        COMMANDS[args.command](args, cfg)
    except CliError as exc:
        print(f"error [{exc.stage}]: {exc}", file=sys.stderr)
        return 1
    except PipelineError as exc:
        print(f"error {exc}", file=sys.stderr)
        return 1
    except (ConfigError, EventLogError, OSError, ValueError, KeyError) as exc:
        print(f"error [{args.command}]: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
