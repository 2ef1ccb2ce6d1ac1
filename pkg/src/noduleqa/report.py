"""Report rendering: condition table, per-case matrix and threshold sweep.

Renderers only format numbers that are already present in the CSV rows
they are given; no statistic is computed here.  Output is byte-deterministic.
"""
from __future__ import annotations

import csv
import io
from pathlib import Path
from xml.sax.saxutils import escape

from .evaluate import (
    ABSENT,
    GREEN,
    RED,
    YELLOW,
    CaseMatrix,
    SensitivityReport,
    condition_deltas,
    format_percent,
    per_case_matrix,
)

STATUS_FILL = {GREEN: "#4caf50", YELLOW: "#ffd54f", RED: "#e53935", ABSENT: "#bdbdbd"}

CONDITION_HEADER = ["condition_id", "label", "detected", "total", "sensitivity", "sensitivity_pct"]
MATRIX_HEADER = ["case_id", "condition_id", "detected", "total", "fraction", "status"]
SWEEP_HEADER = ["condition_id", "threshold", "detected", "total", "sensitivity"]
DELTA_HEADER = ["condition_id", "label", "sensitivity", "pp_delta", "relative_change_pct"]


def _csv(header: list[str], rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=header, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def _ratio(detected: int, total: int) -> str:
    return "" if total == 0 else repr(detected / total)


def condition_rows(report: SensitivityReport) -> list[dict]:
    rows = []
    for cond, s in report.per_condition.items():
        rows.append(
            {
                "condition_id": cond,
                "label": report.labels.get(cond, cond),
                "detected": s.detected,
                "total": s.total,
                "sensitivity": _ratio(s.detected, s.total),
                "sensitivity_pct": s.percent,
            }
        )
    return rows


def _has_baseline(report: SensitivityReport) -> bool:
    # deltas need a defined baseline sensitivity
    return "baseline" in report.conditions and report.condition_totals("baseline").total > 0


def delta_rows(report: SensitivityReport) -> list[dict]:
    if not _has_baseline(report):
        return []
    rows = []
    for cond, d in condition_deltas(report).items():
        rows.append(
            {
                "condition_id": cond,
                "label": report.labels.get(cond, cond),
                "sensitivity": _ratio(d.sensitivity.detected, d.sensitivity.total),
                "pp_delta": d.pp_one_decimal(),
                "relative_change_pct": d.relative_pct_one_decimal(),
            }
        )
    return rows


def sweep_rows(report: SensitivityReport) -> list[dict]:
    rows = []
    for cond in report.conditions:
        for t, s in report.sweep.get(cond, []):
            rows.append(
                {
                    "condition_id": cond,
                    "threshold": f"{t:g}",
                    "detected": s.detected,
                    "total": s.total,
                    "sensitivity": _ratio(s.detected, s.total),
                }
            )
    return rows


def _footnote(report: SensitivityReport) -> str | None:
    if len(report.conditions) < 2 or not _has_baseline(report):
        return None
    deltas = condition_deltas(report)
    others = [c for c in report.conditions if c != "baseline" and c in deltas]
    if not others:
        return None
    # worst = lowest sensitivity; first in reporting order on ties
    worst = min(others, key=lambda c: (deltas[c].pp_delta, others.index(c)))
    d = deltas[worst]
    label = report.labels.get(worst, worst)
    if d.relative_change is None:
        rel = "relative change undefined"
    else:
        rel = f"{d.relative_headline}% relative"
    return f"pp = percentage points. {label}: {d.pp_headline} pp from baseline ({rel})."


def emit_condition_table(report: SensitivityReport) -> tuple[str, str]:
    """Monospace table plus ``sensitivity_by_condition.csv`` text."""
    rows = condition_rows(report)
    header = ("Imaging Condition", "Detected", "Total Nodules", "Sensitivity (%)")
    body = [
        (r["label"], str(r["detected"]), str(r["total"]), r["sensitivity_pct"] + ("%" if r["total"] else ""))
        for r in rows
    ]
    widths = [max(len(x) for x in col) for col in zip(header, *body)]

    def line(cells):
        first = cells[0].ljust(widths[0])
        rest = [c.rjust(w) for c, w in zip(cells[1:], widths[1:])]
        return "  ".join([first, *rest]).rstrip()

    out = [line(header), "  ".join("-" * w for w in widths)]
    out += [line(b) for b in body]
    note = _footnote(report)
    if note:
        out += ["", note]
    return "\n".join(out) + "\n", _csv(CONDITION_HEADER, rows)


def emit_case_matrix_csv(matrix: CaseMatrix) -> str:
    return _csv(MATRIX_HEADER, matrix.rows())


def emit_case_matrix_svg(matrix: CaseMatrix) -> str:
    """Grid heatmap: one row per case, one column per condition, aggregate footer."""
    if not matrix.cases or not matrix.conditions:
        raise ValueError("case matrix is empty")
    rows = matrix.rows()
    cw, ch, left, top = 110, 26, 150, 60
    n_rows = len(matrix.cases) + 1
    width = left + cw * len(matrix.conditions) + 20
    height = top + ch * n_rows + 40
    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<text x="{width / 2:g}" y="20" text-anchor="middle" font-size="14">'
        "Per-case detection across acquisition conditions</text>",
    ]
    for j, cond in enumerate(matrix.conditions):
        x = left + cw * j + cw / 2
        parts.append(
            f'<text x="{x:g}" y="{top - 10}" text-anchor="middle">'
            f"{escape(matrix.labels.get(cond, cond))}</text>"
        )
    row_names = [*matrix.cases, "ALL"]
    for i, name in enumerate(row_names):
        y = top + ch * i
        shown = "Aggregate" if name == "ALL" else name
        parts.append(
            f'<text x="{left - 8}" y="{y + ch / 2 + 4:g}" text-anchor="end">{escape(shown)}</text>'
        )
    for k, r in enumerate(rows):
        # footer rows follow the case rows, so divmod lands them on the last grid row
        i, j = divmod(k, len(matrix.conditions))
        x, y = left + cw * j, top + ch * i
        if r["status"] == ABSENT and r["total"] == "":
            label = "n/a"
        else:
            label = f"{r['detected']}/{r['total']}"
            if r["case_id"] == "ALL":
                label += f" ({format_percent(r['detected'], r['total'])}%)"
        parts.append(
            f'<rect x="{x}" y="{y}" width="{cw}" height="{ch}" fill="{STATUS_FILL[r["status"]]}" '
            f'stroke="#ffffff" stroke-width="1" data-case="{escape(r["case_id"])}" '
            f'data-condition="{escape(r["condition_id"])}" data-status="{r["status"]}"/>'
        )
        parts.append(
            f'<text x="{x + cw / 2:g}" y="{y + ch / 2 + 4:g}" text-anchor="middle">{escape(label)}</text>'
        )
    legend_y = top + ch * n_rows + 24
    for k, (status, text) in enumerate(
        [(GREEN, "100%"), (YELLOW, "partial"), (RED, "0%"), (ABSENT, "no output")]
    ):
        x = left + 100 * k
        parts.append(f'<rect x="{x}" y="{legend_y - 10}" width="12" height="12" fill="{STATUS_FILL[status]}"/>')
        parts.append(f'<text x="{x + 16}" y="{legend_y}">{text}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# sweep chart layout
SWEEP_W, SWEEP_H = 640, 400
PLOT_LEFT, PLOT_RIGHT, PLOT_TOP, PLOT_BOTTOM = 70, 170, 40, 50
GUIDE_THRESHOLD = 0.5

SERIES_COLORS = {
    "baseline": "#000000",
    "dose_25": "#1f4e9c",
    "dose_50": "#5b9bd5",
    "thick_3mm": "#ff8c00",
    "thick_5mm": "#d62728",
}
_FALLBACK_COLORS = ["#2ca02c", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#17becf"]


def sweep_x(threshold: float) -> float:
    """Horizontal pixel position of a threshold (axis spans 0..1)."""
    plot_w = SWEEP_W - PLOT_LEFT - PLOT_RIGHT
    return PLOT_LEFT + threshold * plot_w


def sweep_y(sens: float) -> float:
    plot_h = SWEEP_H - PLOT_TOP - PLOT_BOTTOM
    return PLOT_TOP + (1.0 - sens) * plot_h


def emit_sweep_csv(report: SensitivityReport) -> str:
    return _csv(SWEEP_HEADER, sweep_rows(report))


def emit_sweep_svg(report_or_rows, labels: dict[str, str] | None = None) -> str:
    """Sensitivity-vs-threshold polylines with a dotted guide at 0.5.

    Accepts a :class:`SensitivityReport` or the rows of ``threshold_sweep.csv``.
    """
    if isinstance(report_or_rows, SensitivityReport):
        labels = labels or report_or_rows.labels
        rows = sweep_rows(report_or_rows)
    else:
        rows = list(report_or_rows)
    labels = labels or {}
    series: dict[str, list[tuple[float, float]]] = {}
    for r in rows:
        if r["sensitivity"] == "":
            continue
        series.setdefault(r["condition_id"], []).append((float(r["threshold"]), float(r["sensitivity"])))
    if not series:
        raise ValueError("no sweep curves to draw")

    x0, x1 = sweep_x(0.0), sweep_x(1.0)
    y0, y1 = sweep_y(0.0), sweep_y(1.0)
    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{SWEEP_W}" height="{SWEEP_H}" '
        f'viewBox="0 0 {SWEEP_W} {SWEEP_H}" font-family="sans-serif" font-size="12">',
        f'<text x="{(x0 + x1) / 2:g}" y="22" text-anchor="middle" font-size="14">'
        "Sensitivity vs confidence threshold</text>",
        f'<line x1="{x0:g}" y1="{y0:g}" x2="{x1:g}" y2="{y0:g}" stroke="#000000"/>',
        f'<line x1="{x0:g}" y1="{y0:g}" x2="{x0:g}" y2="{y1:g}" stroke="#000000"/>',
    ]
    for k in range(11):
        t = k / 10
        parts.append(f'<line x1="{sweep_x(t):g}" y1="{y0:g}" x2="{sweep_x(t):g}" y2="{y0 + 4:g}" stroke="#000000"/>')
        parts.append(f'<text x="{sweep_x(t):g}" y="{y0 + 18:g}" text-anchor="middle">{t:.1f}</text>')
        parts.append(f'<line x1="{x0 - 4:g}" y1="{sweep_y(t):g}" x2="{x0:g}" y2="{sweep_y(t):g}" stroke="#000000"/>')
        parts.append(f'<text x="{x0 - 8:g}" y="{sweep_y(t) + 4:g}" text-anchor="end">{t * 100:.0f}%</text>')
    parts.append(f'<text x="{(x0 + x1) / 2:g}" y="{SWEEP_H - 10}" text-anchor="middle">Confidence threshold</text>')
    parts.append(
        f'<text x="18" y="{(y0 + y1) / 2:g}" text-anchor="middle" '
        f'transform="rotate(-90 18 {(y0 + y1) / 2:g})">Sensitivity</text>'
    )
    gx = sweep_x(GUIDE_THRESHOLD)
    parts.append(
        f'<line id="guide" x1="{gx:g}" y1="{y0:g}" x2="{gx:g}" y2="{y1:g}" stroke="#555555" '
        f'stroke-dasharray="2,3" data-threshold="{GUIDE_THRESHOLD:g}"/>'
    )
    fallback = iter(_FALLBACK_COLORS * 4)
    for k, (cond, pts) in enumerate(series.items()):
        color = SERIES_COLORS.get(cond) or next(fallback)
        coords = " ".join(f"{sweep_x(t):.2f},{sweep_y(s):.2f}" for t, s in pts)
        parts.append(
            f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}" '
            f'data-condition="{escape(cond)}"/>'
        )
        ly = PLOT_TOP + 10 + 20 * k
        lx = x1 + 15
        parts.append(f'<line x1="{lx:g}" y1="{ly}" x2="{lx + 20:g}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{lx + 26:g}" y="{ly + 4}">{escape(labels.get(cond, cond))}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


REPORT_FILES = (
    "sensitivity_by_condition.csv",
    "per_case_matrix.csv",
    "threshold_sweep.csv",
    "deltas.csv",
    "condition_table.txt",
    "per_case_matrix.svg",
    "threshold_sweep.svg",
)


def write_report(report: SensitivityReport, out_dir) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table, cond_csv = emit_condition_table(report)
    matrix = per_case_matrix(report)
    docs = {
        "sensitivity_by_condition.csv": cond_csv,
        "per_case_matrix.csv": emit_case_matrix_csv(matrix),
        "threshold_sweep.csv": emit_sweep_csv(report),
        "deltas.csv": _csv(DELTA_HEADER, delta_rows(report)),
        "condition_table.txt": table,
    }
    if matrix.cases and matrix.conditions:
        docs["per_case_matrix.svg"] = emit_case_matrix_svg(matrix)
    if any(r["sensitivity"] != "" for r in sweep_rows(report)):
        docs["threshold_sweep.svg"] = emit_sweep_svg(report)
    paths = {}
    for name, text in docs.items():
        p = out_dir / name
        p.write_text(text, encoding="utf-8", newline="")
        paths[name] = p
    return paths
