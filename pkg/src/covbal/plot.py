"""Deterministic SVG line charts from summary and entropy CSVs."""
from __future__ import annotations

import csv
import io
import re
from fractions import Fraction
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


class PlotError(ValueError):
    pass


_SWEEP = re.compile(r"\[(?P<param>[^=\]]+)=(?P<value>[^\]]+)\]$")


def sweep_point(scenario: str) -> tuple[str, float | str]:
    """Parse ``label[param=value]`` into (param, value); numeric when possible."""
    m = _SWEEP.search(scenario)
    if not m:
        return "scenario", scenario
    raw = m.group("value")
    try:
        return m.group("param"), float(Fraction(raw))
    except (ValueError, ZeroDivisionError):
        return m.group("param"), raw


def read_rows(path) -> list[dict]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
    except (OSError, UnicodeDecodeError, csv.Error) as exc:
        raise PlotError(f"{path}: cannot read CSV: {exc}") from exc
    return rows


def sd_series(rows: list[dict], metric: str | None = None, group: int | None = None):
    """{procedure: [(x, sd), ...]} from a simulate summary CSV."""
    need = {"scenario", "procedure", "metric", "group", "sd"}
    if not rows or not need <= set(rows[0]):
        raise PlotError(f"summary CSV needs columns {sorted(need)}")
    if metric is None:
        metric = rows[0]["metric"]
    if group is None:
        group = int(rows[0]["group"])
    series: dict[str, list] = {}
    xlabel = "scenario"
    for r in rows:
        if r["metric"] != metric or int(r["group"]) != group or r["sd"] == "":
            continue
        xlabel, x = sweep_point(r["scenario"])
        try:
            y = float(r["sd"])
        except ValueError as exc:
            raise PlotError(f"malformed sd value {r['sd']!r}") from exc
        series.setdefault(r["procedure"], []).append((x, y))
    return series, xlabel, f"SD of n^-1/2 D: {metric}, group {group}"


def entropy_series(rows: list[dict], quantities: list[str] | None = None):
    """{quantity: [(x, value), ...]} from a long-format entropy CSV."""
    need = {"scenario", "quantity", "value"}
    if not rows or not need <= set(rows[0]):
        raise PlotError(f"entropy CSV needs columns {sorted(need)}")
    series: dict[str, list] = {}
    xlabel = "scenario"
    for r in rows:
        if quantities and r["quantity"] not in quantities:
            continue
        xlabel, x = sweep_point(r["scenario"])
        try:
            series.setdefault(r["quantity"], []).append((x, float(r["value"])))
        except ValueError as exc:
            raise PlotError(f"malformed value {r['value']!r}") from exc
    return series, xlabel, "entropy and sum of variances (nats)"


def render_svg(series: dict[str, list], xlabel: str, title: str) -> str:
    if not series or not any(series.values()):
        raise PlotError("nothing to plot: every series is empty")
    with plt.rc_context({"svg.hashsalt": "covbal", "svg.fonttype": "none", "path.simplify": False}):
        fig, ax = plt.subplots(figsize=(6.4, 4.2))
        categorical = any(isinstance(x, str) for pts in series.values() for x, _ in pts)
        for name in sorted(series):
            pts = series[name]
            if not pts:
                continue
            xs, ys = zip(*(pts if categorical else sorted(pts)))
            ax.plot(xs, ys, marker="o", label=name)
        ax.set_xlabel(xlabel)
        ax.set_title(title, fontsize=10)
        ax.legend(fontsize=8)
        ax.grid(alpha=0.3)
        buf = io.StringIO()
        fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": "covbal"})
        plt.close(fig)
    return buf.getvalue()


def plot_csv(csv_path, out_path, kind: str = "sd", metric: str | None = None,
             group: int | None = None, quantities: list[str] | None = None) -> Path:
    """Render ``csv_path`` to ``out_path``; nothing is written on error."""
    rows = read_rows(csv_path)
    if kind == "sd":
        series, xlabel, title = sd_series(rows, metric, group)
    elif kind == "entropy":
        series, xlabel, title = entropy_series(rows, quantities)
    else:
        raise PlotError(f"unknown plot kind {kind!r}")
    svg = render_svg(series, xlabel, title)
    out = Path(out_path)
    out.write_text(svg, encoding="utf-8")
    return out
