"""Minimal SVG line charts rendered from aggregated CSV files.

A chart has one polyline per series, a shaded band between the CI columns
and an optional dashed horizontal baseline. Everything drawn comes from the
CSV, so a plot can always be regenerated from its table.
"""

from __future__ import annotations

import csv
import math
from html import escape
from pathlib import Path
from typing import Optional

WIDTH, HEIGHT = 640, 400
MARGIN = dict(left=64, right=150, top=24, bottom=48)
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")


def _num(v) -> float:
    try:
        return float(v)
    except (TypeError, ValueError):
        return math.nan


def _fmt(v: float) -> str:
    return f"{v:.4g}"


def line_chart(
    rows: list[dict],
    x: str,
    y: str,
    series: Optional[str] = None,
    baseline: Optional[float] = None,
    title: str = "",
    log_x: bool = False,
) -> str:
    """SVG text for ``y`` against ``x``; uses ``<y>_ci_low``/``<y>_ci_high`` when present."""
    groups: dict = {}
    for r in rows:
        xv, yv = _num(r.get(x)), _num(r.get(y))
        if math.isnan(xv) or math.isnan(yv):
            continue
        lo, hi = _num(r.get(f"{y}_ci_low")), _num(r.get(f"{y}_ci_high"))
        groups.setdefault(str(r.get(series, "")) if series else "", []).append((xv, yv, lo, hi))
    pts = [p for g in groups.values() for p in g]
    tx = (lambda v: math.log2(v)) if log_x else (lambda v: v)
    xs = [tx(p[0]) for p in pts] or [0.0, 1.0]
    ys = [v for p in pts for v in p[1:] if not math.isnan(v)]
    if baseline is not None and not math.isnan(baseline):
        ys.append(baseline)
    ys = ys or [0.0, 1.0]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    pad = 0.05 * (y1 - y0 or 1.0)
    y0, y1 = y0 - pad, y1 + pad
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def sx(v):
        return MARGIN["left"] + (tx(v) - x0) / (x1 - x0) * pw

    def sy(v):
        return MARGIN["top"] + (y1 - v) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="11">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.1f}" y="16" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<rect x="{MARGIN["left"]}" y="{MARGIN["top"]}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>',
    ]
    for k in range(5):
        v = y0 + (y1 - y0) * k / 4
        out.append(f'<text x="{MARGIN["left"] - 6}" y="{sy(v) + 4:.1f}" text-anchor="end">{_fmt(v)}</text>')
    for v in sorted({p[0] for p in pts}):
        out.append(f'<text x="{sx(v):.1f}" y="{HEIGHT - MARGIN["bottom"] + 16}" text-anchor="middle">{_fmt(v)}</text>')
    out.append(f'<text x="{MARGIN["left"] + pw / 2:.1f}" y="{HEIGHT - 10}" text-anchor="middle">{escape(x)}</text>')
    out.append(
        f'<text x="14" y="{MARGIN["top"] + ph / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 14 {MARGIN["top"] + ph / 2:.1f})">{escape(y)}</text>'
    )
    if baseline is not None and not math.isnan(baseline):
        yb = sy(baseline)
        out.append(
            f'<line x1="{MARGIN["left"]}" x2="{MARGIN["left"] + pw}" y1="{yb:.1f}" y2="{yb:.1f}" '
            'stroke="#000" stroke-dasharray="6 4"/>'
        )
    for n, (name, g) in enumerate(groups.items()):
        g = sorted(g)
        color = PALETTE[n % len(PALETTE)]
        band = [(p[0], p[2], p[3]) for p in g if not (math.isnan(p[2]) or math.isnan(p[3]))]
        if len(band) > 1:
            poly = [f"{sx(a):.1f},{sy(hi):.1f}" for a, _, hi in band]
            poly += [f"{sx(a):.1f},{sy(lo):.1f}" for a, lo, _ in reversed(band)]
            out.append(f'<polygon points="{" ".join(poly)}" fill="{color}" fill-opacity="0.15" stroke="none"/>')
        line = " ".join(f"{sx(p[0]):.1f},{sy(p[1]):.1f}" for p in g)
        out.append(f'<polyline points="{line}" fill="none" stroke="{color}" stroke-width="2"/>')
        for p in g:
            out.append(f'<circle cx="{sx(p[0]):.1f}" cy="{sy(p[1]):.1f}" r="2.5" fill="{color}"/>')
        ly = MARGIN["top"] + 14 + 16 * n
        lx = WIDTH - MARGIN["right"] + 10
        out.append(f'<line x1="{lx}" x2="{lx + 18}" y1="{ly - 4}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 24}" y="{ly}">{escape(name)}</text>')
    if baseline is not None and not math.isnan(baseline):
        ly = MARGIN["top"] + 14 + 16 * len(groups)
        lx = WIDTH - MARGIN["right"] + 10
        out.append(f'<line x1="{lx}" x2="{lx + 18}" y1="{ly - 4}" y2="{ly - 4}" stroke="#000" stroke-dasharray="6 4"/>')
        out.append(f'<text x="{lx + 24}" y="{ly}">baseline</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def render_csv(
    csv_path,
    svg_path,
    x: str,
    y: str = "mae",
    series: Optional[str] = None,
    baseline_column: Optional[str] = "baseline_mae",
    title: str = "",
    log_x: bool = False,
) -> Path:
    """Read an aggregated table and write its chart; the baseline is the column mean."""
    with open(csv_path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    baseline = None
    if baseline_column:
        vals = [_num(r.get(baseline_column)) for r in rows]
        vals = [v for v in vals if not math.isnan(v)]
        baseline = sum(vals) / len(vals) if vals else None
    svg_path = Path(svg_path)
    svg_path.write_text(line_chart(rows, x, y, series, baseline, title, log_x), encoding="utf-8")
    return svg_path
