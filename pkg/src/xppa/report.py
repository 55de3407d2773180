"""Static HTML/SVG report built from the JSON artifacts of a run.

The renderer only lays out numbers already present in the artifacts; it
never derives new ones beyond sorting and filtering.
"""

from __future__ import annotations

import html
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

TOP_N = 15
UNIT_TEXT = {"days": "days", "signed_probability": "shift in probability [-1, +1]", "kpi": "KPI units"}
DERIVED_NOTE = ("Derived attributes are computed by the monitor (elapsed time, weekday, running cost) "
                "rather than recorded in the log; read them as summaries of the case so far.")


@dataclass
class ReportBundle:
    overview: dict
    globals: list[dict]
    cases: list[dict] = field(default_factory=list)
    unit: str = "kpi"

    @classmethod
    def from_dir(cls, output_dir: str | Path) -> "ReportBundle":
        out = Path(output_dir)
        report = _load(out / "report.json")
        cases = _load(out / "cases.json") if (out / "cases.json").exists() else []
        return cls(report, _load(out / "global.json"), cases, report.get("unit", "kpi"))

    @property
    def kpi_average(self) -> float | None:
        return self.overview.get("kpi_average")


def _load(path: Path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _num(x, digits: int = 3) -> str:
    if x is None:
        return "n/a"
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(x)
    return f"{x:.{digits}f}"


def select_globals(globals_: Sequence[dict], sort: str = "mean", filter_label: str | None = None,
                   top_n: int | None = TOP_N) -> list[dict]:
    """Filter by label substring, order by |sort statistic| then label, keep the top N."""
    if sort not in ("mean", "median"):
        raise ValueError("sort must be 'mean' or 'median'")
    rows = [g for g in globals_ if filter_label is None or filter_label in g["label"]]
    rows = sorted(rows, key=lambda g: (-abs(g[sort]), g["label"]))
    return rows if top_n is None else rows[:top_n]


def count_quantiles(counts: Sequence[int]) -> list[float]:
    """Empirical quantile in [0, 1] of each count among ``counts``; ties share a value."""
    c = np.asarray(counts, dtype=float)
    if len(c) <= 1:
        return [1.0] * len(c)
    below = np.array([np.sum(c < v) for v in c])
    return list(below / (len(c) - 1))


def _fill(value: float, darkness: float) -> str:
    hue = 4 if value >= 0 else 214
    lightness = 78 - 46 * darkness
    return f"hsl({hue},70%,{lightness:.0f}%)"


def bar_chart_svg(items: Sequence[tuple[str, float, float]], unit: str, width: int = 760,
                  axis_limit: float | None = None) -> str:
    """Horizontal signed bars; items are (label, value, darkness in [0, 1])."""
    label_w, pad, bar_h, gap = 280, 16, 18, 6
    plot_w = width - label_w - 2 * pad
    limit = axis_limit if axis_limit is not None else max([abs(v) for _, v, _ in items] + [1e-12])
    zero_x = label_w + pad + plot_w / 2
    scale = (plot_w / 2) / limit
    height = 40 + len(items) * (bar_h + gap) + 30
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">']
    out.append(f'<line x1="{zero_x:.1f}" y1="30" x2="{zero_x:.1f}" y2="{height - 30}" stroke="#444"/>')
    for i, (label, value, dark) in enumerate(items):
        y = 36 + i * (bar_h + gap)
        length = abs(value) * scale
        x = zero_x if value >= 0 else zero_x - length
        out.append(f'<text x="{label_w}" y="{y + 13}" text-anchor="end">{html.escape(label)}</text>')
        out.append(f'<rect class="bar" x="{x:.1f}" y="{y}" width="{length:.1f}" height="{bar_h}" '
                   f'fill="{_fill(value, dark)}" data-value="{value:.6g}"><title>{html.escape(label)}: '
                   f'{value:+.4g}</title></rect>')
        tx = x + length + 4 if value >= 0 else x - 4
        anchor = "start" if value >= 0 else "end"
        out.append(f'<text x="{tx:.1f}" y="{y + 13}" text-anchor="{anchor}" fill="#333">{value:+.3g}</text>')
    ty = height - 12
    for v in (-limit, 0.0, limit):
        out.append(f'<text x="{zero_x + v * scale:.1f}" y="{ty}" text-anchor="middle">{v:+.3g}</text>')
    out.append(f'<text x="{pad}" y="18" font-weight="bold">{html.escape(UNIT_TEXT.get(unit, unit))}</text>')
    out.append("</svg>")
    return "\n".join(out)


def render_global_chart(globals_: Sequence[dict], unit: str = "kpi", sort: str = "mean",
                        top_n: int = TOP_N) -> str:
    """Bar chart of global explanations; darker bars are carried by more cases."""
    if not globals_:
        raise ValueError("nothing to chart")
    rows = select_globals(globals_, sort, None, top_n)
    dark = count_quantiles([g["count"] for g in rows])
    limit = 1.0 if unit == "signed_probability" else None
    return bar_chart_svg([(g["label"], g[sort], d) for g, d in zip(rows, dark)], unit, axis_limit=limit)


def delta_text(delta: float) -> str:
    return f"{delta:+.1f} vs AVG"


def render_case_panel(case: dict, bundle: ReportBundle, top_n: int = TOP_N) -> str:
    """HTML fragment for one case: header values, bars, derived section, efficiency footer."""
    unit = bundle.unit
    expl = [e for e in case["explanations"] if e["shap"] != 0.0]
    process = sorted((e for e in expl if not e["derived"]), key=lambda e: (-abs(e["shap"]), e["label"]))[:top_n]
    derived = sorted((e for e in expl if e["derived"]), key=lambda e: (-abs(e["shap"]), e["label"]))
    limit = 1.0 if unit == "signed_probability" else None
    parts = [f'<section class="case" id="case-{html.escape(case["case_id"])}">',
             f'<h2>Case {html.escape(case["case_id"])}</h2>',
             "<table class=\"header\">",
             f"<tr><th>Events so far</th><td>{case['prefix_length']}</td></tr>",
             f"<tr><th>Last activity</th><td>{html.escape(str(case['last_activity']))}</td></tr>",
             f"<tr><th>Current value</th><td>{_num(case.get('current_value'))}</td></tr>",
             f"<tr><th>Predicted value</th><td>{_num(case['prediction'])}</td></tr>",
             f"<tr><th>Base value</th><td>{_num(case['base_value'])}</td></tr>",
             f"<tr><th>Expected vs average</th><td class=\"delta\">{delta_text(case['delta_vs_average'])}</td></tr>",
             "</table>"]
    if process:
        parts.append(bar_chart_svg([(e["label"], e["shap"], 1.0) for e in process], unit, axis_limit=limit))
    else:
        parts.append("<p>No process attribute moves this prediction.</p>")
    if derived:
        parts.append('<div class="derived"><h3>Derived attributes</h3>')
        parts.append(f"<p class=\"note\">{html.escape(DERIVED_NOTE)}</p>")
        parts.append(bar_chart_svg([(e["label"], e["shap"], 1.0) for e in derived], unit, axis_limit=limit))
        parts.append("</div>")
    parts.append(f'<p class="footer">Sum of contributions: {case["shap_total"]:+.4f}; '
                 f'prediction {case["prediction"]:.4f} from base {case["base_value"]:.4f}.</p>')
    parts.append("</section>")
    return "\n".join(parts)


_UNSAFE = re.compile(r"[^A-Za-z0-9._-]")


def case_filename(case_id: str) -> str:
    return _UNSAFE.sub("_", case_id) + ".html"


_STYLE = ("body{font-family:sans-serif;margin:2em;max-width:900px} table{border-collapse:collapse}"
          " th,td{padding:2px 10px;text-align:left} .derived{border-top:2px dashed #999;margin-top:1em}"
          " .note{color:#555;font-size:90%}")


def page(title: str, body: str) -> str:
    return (f"<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>{html.escape(title)}</title>"
            f"<style>{_STYLE}</style></head><body>\n{body}\n</body></html>\n")


def _overview_table(report: dict) -> str:
    stats = report.get("log_stats", {})
    rows = [("Traces", stats.get("n_traces")), ("Activities", stats.get("n_activities")),
            ("Mean events per trace", stats.get("mean_events_per_trace")),
            ("Mean case duration (days)", stats.get("mean_duration_days")),
            (f"Test {report.get('metric', 'score').upper()}", report.get("test_score")),
            ("Prefix-length baseline", report.get("baseline_score")),
            ("Average KPI (training)", report.get("kpi_average")),
            ("History", report.get("history_search", {}).get("chosen_history")),
            ("Trees / depth", "{n_trees} / {max_depth}".format(**report["grid_search"]["chosen"])
             if "grid_search" in report else None),
            ("Explained prefixes", report.get("n_explained"))]
    cells = "".join(f"<tr><th>{html.escape(k)}</th><td>{html.escape(_num(v) if not isinstance(v, str) else v)}"
                    f"</td></tr>" for k, v in rows if v is not None)
    return f"<table class=\"overview\">{cells}</table>"


def write_report(output_dir: str | Path, sort: str = "mean", filter_label: str | None = None,
                 top_n: int = TOP_N) -> Path:
    """Render ``report/`` under ``output_dir`` from its JSON artifacts."""
    out = Path(output_dir)
    bundle = ReportBundle.from_dir(out)
    rep_dir = out / "report"
    (rep_dir / "cases").mkdir(parents=True, exist_ok=True)
    shown = select_globals(bundle.globals, sort, filter_label, None)
    process = [g for g in shown if not g["derived"]]
    derived = [g for g in shown if g["derived"]]
    body = ["<h1>Predictive monitoring report</h1>", _overview_table(bundle.overview),
            f"<h2>Global influence ({sort}, top {top_n})</h2>"]
    if process:
        svg = render_global_chart(process, bundle.unit, sort, top_n)
        (rep_dir / "global.svg").write_text(svg + "\n", encoding="utf-8")
        body.append('<img src="global.svg" alt="global influence chart">')
    else:
        body.append("<p>No labels match.</p>")
    if derived:
        body.append('<div class="derived"><h3>Derived attributes</h3>')
        body.append(f"<p class=\"note\">{html.escape(DERIVED_NOTE)}</p>")
        body.append(render_global_chart(derived, bundle.unit, sort, top_n))
        body.append("</div>")
    if bundle.cases:
        links = "".join(f'<li><a href="cases/{case_filename(c["case_id"])}">{html.escape(c["case_id"])}</a> '
                        f'{delta_text(c["delta_vs_average"])}</li>' for c in bundle.cases)
        body.append(f"<h2>Cases</h2><ul>{links}</ul>")
    for c in bundle.cases:
        (rep_dir / "cases" / case_filename(c["case_id"])).write_text(
            page(f"Case {c['case_id']}", render_case_panel(c, bundle, top_n)), encoding="utf-8")
    index = rep_dir / "index.html"
    index.write_text(page("Predictive monitoring report", "\n".join(body)), encoding="utf-8")
    return index
