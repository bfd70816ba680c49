"""Indicator tables as CSV / JSON and a dependency-free grouped-bar SVG."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from xml.sax.saxutils import escape

from .metrics import DEFAULT_IOU, FedIndicators

HEADER_NOTE = f"# mAP at IoU {DEFAULT_IOU:.2f}, VOC all-point interpolation"
VALUE_FORMAT = "{:.6f}"
PALETTE = ("#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860", "#da8bc3", "#8c8c8c", "#ccb974", "#64b5cd")


def table_rows(columns: dict[str, FedIndicators], indicators: list[str] | None = None) -> list[list[str]]:
    """Indicator-major table: one row per indicator, one column per model."""
    if not columns:
        raise ValueError("no columns to report")
    rows = {name: ind.as_row() for name, ind in columns.items()}
    keys = indicators or list(next(iter(rows.values())))
    out = [["indicator", *columns]]
    for k in keys:
        out.append([k, *(VALUE_FORMAT.format(rows[name][k]) for name in columns)])
    return out


def table_csv(columns: dict[str, FedIndicators], indicators: list[str] | None = None) -> str:
    buf = io.StringIO()
    buf.write(HEADER_NOTE + "\n")
    csv.writer(buf, lineterminator="\n").writerows(table_rows(columns, indicators))
    return buf.getvalue()


def read_table_csv(text: str) -> dict[str, dict[str, float]]:
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    names = rows[0][1:]
    out: dict[str, dict[str, float]] = {n: {} for n in names}
    for row in rows[1:]:
        for n, v in zip(names, row[1:]):
            out[n][row[0]] = float(v)
    return out


def round_log_csv(rows: list[tuple[int, str, FedIndicators]]) -> str:
    """Long-format per-round log: round, model, then every indicator."""
    buf = io.StringIO()
    buf.write(HEADER_NOTE + "\n")
    w = csv.writer(buf, lineterminator="\n")
    keys = list(rows[0][2].as_row())
    w.writerow(["round", "model", *keys])
    for t, name, ind in rows:
        r = ind.as_row()
        w.writerow([t, name, *(VALUE_FORMAT.format(r[k]) for k in keys)])
    return buf.getvalue()


def table_json(columns: dict[str, FedIndicators], meta: dict | None = None) -> str:
    doc = {
        "iou_threshold": DEFAULT_IOU,
        "columns": {
            name: {
                "indicators": ind.as_row(),
                "per_client": {str(c): v for c, v in sorted(ind.per_client.items())},
            }
            for name, ind in columns.items()
        },
    }
    if meta:
        doc["meta"] = meta
    return json.dumps(doc, indent=2, sort_keys=False) + "\n"


def grouped_bar_svg(columns: dict[str, FedIndicators], title: str = "", indicators: list[str] | None = None) -> str:
    """Groups are indicators, bars within a group are the model columns."""
    rows = {name: ind.as_row() for name, ind in columns.items()}
    keys = indicators or list(next(iter(rows.values())))
    names = list(columns)
    bar_w, gap, plot_h = 14, 18, 220
    left, top, bottom = 50, 30, 40
    group_w = bar_w * len(names) + gap
    legend_h = 16 * len(names)
    width = left + group_w * len(keys) + 20
    height = top + plot_h + bottom + legend_h
    top_val = max(1.0, max(v for r in rows.values() for v in r.values()))
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
        f'<text x="{left}" y="18" font-size="13">{escape(title)}</text>',
        f'<line x1="{left}" y1="{top + plot_h}" x2="{width - 10}" y2="{top + plot_h}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" stroke="black"/>',
    ]
    for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = top + plot_h - plot_h * tick / top_val
        parts.append(f'<text x="{left - 6}" y="{y + 4:.1f}" text-anchor="end">{tick:.2f}</text>')
    for g, key in enumerate(keys):
        x0 = left + gap / 2 + g * group_w
        for b, name in enumerate(names):
            v = rows[name][key]
            h = plot_h * v / top_val
            parts.append(
                f'<rect x="{x0 + b * bar_w:.1f}" y="{top + plot_h - h:.1f}" width="{bar_w - 1}" height="{h:.1f}" '
                f'fill="{PALETTE[b % len(PALETTE)]}"><title>{escape(name)} {escape(key)} = {v:.4f}</title></rect>'
            )
        cx = x0 + bar_w * len(names) / 2
        parts.append(f'<text x="{cx:.1f}" y="{top + plot_h + 16}" text-anchor="middle">{escape(key)}</text>')
    for b, name in enumerate(names):
        y = top + plot_h + bottom + 16 * b
        parts.append(f'<rect x="{left}" y="{y}" width="10" height="10" fill="{PALETTE[b % len(PALETTE)]}"/>')
        parts.append(f'<text x="{left + 16}" y="{y + 9}">{escape(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_report(directory, stem: str, columns: dict[str, FedIndicators], title: str = "", indicators=None, meta=None):
    """Write <stem>.csv, <stem>.json and <stem>.svg into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / f"{stem}.csv").write_text(table_csv(columns, indicators))
    (d / f"{stem}.json").write_text(table_json(columns, meta))
    (d / f"{stem}.svg").write_text(grouped_bar_svg(columns, title, indicators))
