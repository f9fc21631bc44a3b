"""Deterministic CSV and SVG emission for metrics and error traces.

All writers are byte-deterministic for identical inputs (floats via repr,
no timestamps) and atomic (write to a temp file, then rename), so reruns
of the same seeded command produce identical files and readers never see
partial output.
"""

from __future__ import annotations

import os


def atomic_write_text(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def metrics_summary_csv(report) -> str:
    lines = [
        "metric,value",
        f"rmse,{report.rmse!r}",
        f"acc,{report.acc!r}",
        f"acc_dev,{report.acc_dev!r}",
        f"n_samples,{report.n_samples}",
    ]
    return "\n".join(lines) + "\n"


def windows_csv(report) -> str:
    lines = ["sequence,start,gt,prediction,error"]
    for rec in report.records:
        lines.append(f"{rec.sequence_id},{rec.start},{rec.gt!r},{rec.prediction!r},{rec.error!r}")
    return "\n".join(lines) + "\n"


def parse_windows_csv(text: str) -> list[tuple[str, int, float, float, float]]:
    rows = []
    for lineno, line in enumerate(text.strip().splitlines()):
        if lineno == 0 and line.startswith("sequence,"):
            continue
        seq, start, gt, pred, err = line.split(",")
        rows.append((seq, int(start), float(gt), float(pred), float(err)))
    return rows


def error_trace_csv(trace: list[tuple[int, float]]) -> str:
    lines = ["frame,error"]
    for frame, err in trace:
        lines.append(f"{frame},{err!r}")
    return "\n".join(lines) + "\n"


def svg_error_traces(
    series: dict[str, list[tuple[int, float]]],
    width: int = 900,
    height: int = 300,
    y_label: str = "signed error [m]",
) -> str:
    """Simple line plot: one polyline per named series plus a zero line."""
    palette = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
    margin = 45
    plot_w, plot_h = width - 2 * margin, height - 2 * margin

    xs = [x for pts in series.values() for x, _ in pts]
    ys = [y for pts in series.values() for _, y in pts]
    if not xs:
        xs, ys = [0], [0.0]
    x_min, x_max = min(xs), max(xs)
    y_extent = max(0.5, max(abs(v) for v in ys + [0.0]))
    x_span = max(1, x_max - x_min)

    def px(x):
        return margin + plot_w * (x - x_min) / x_span

    def py(y):
        return margin + plot_h * (1.0 - (y + y_extent) / (2.0 * y_extent))

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{py(0.0):.2f}" x2="{width - margin}" y2="{py(0.0):.2f}" '
        'stroke="#999" stroke-dasharray="4 3"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="#333"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" y2="{height - margin}" '
        'stroke="#333"/>',
        f'<text x="{margin}" y="{margin - 8}" font-size="11" fill="#333">{y_label} '
        f'(+/-{y_extent:.2f})</text>',
        f'<text x="{width - margin}" y="{height - margin + 16}" font-size="11" fill="#333" '
        f'text-anchor="end">frame {x_max}</text>',
        f'<text x="{margin}" y="{height - margin + 16}" font-size="11" fill="#333">frame {x_min}</text>',
    ]
    for i, (name, pts) in enumerate(series.items()):
        if not pts:
            continue
        color = palette[i % len(palette)]
        coords = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in pts)
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{coords}"/>')
        parts.append(
            f'<text x="{width - margin}" y="{margin + 14 * (i + 1)}" font-size="11" '
            f'fill="{color}" text-anchor="end">{name}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_metrics_report(report, out_dir: str, prefix: str = "metrics") -> list[str]:
    """Write summary CSV, per-window CSV, and the trace SVG; returns paths."""
    os.makedirs(out_dir, exist_ok=True)
    summary_path = os.path.join(out_dir, f"{prefix}_summary.csv")
    windows_path = os.path.join(out_dir, f"{prefix}_windows.csv")
    svg_path = os.path.join(out_dir, f"{prefix}_trace.svg")
    atomic_write_text(summary_path, metrics_summary_csv(report))
    atomic_write_text(windows_path, windows_csv(report))
    series: dict[str, list[tuple[int, float]]] = {}
    for rec in report.records:
        series.setdefault(rec.sequence_id, []).append((rec.start, rec.error))
    atomic_write_text(svg_path, svg_error_traces(series))
    return [summary_path, windows_path, svg_path]
