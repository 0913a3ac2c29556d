"""Static SVG line charts of trajectory columns.

Output is a pure function of the inputs (fixed viewport, palette and number
formatting), so charts diff cleanly between runs.
"""

from __future__ import annotations

import fnmatch
import math
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .errors import UnknownColumn
from .network import NetworkModel
from .traces import Table, read_table

WIDTH, HEIGHT = 800, 450
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 70, 170, 20, 50
N_TICKS = 10
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


def select_columns(table: Table, selector: str) -> list[str]:
    """Resolve a comma-separated list of glob patterns against the data columns."""
    patterns = [p.strip() for p in (selector or "").split(",") if p.strip()]
    if not patterns:
        raise UnknownColumn("empty column selector")
    chosen: list[str] = []
    for pat in patterns:
        hits = [c for c in table.columns if c != "t" and fnmatch.fnmatchcase(c, pat)]
        if not hits:
            raise UnknownColumn(f"no column matches {pat!r}")
        chosen += [c for c in hits if c not in chosen]
    return chosen


def flow_limits(net: NetworkModel | None, columns: list[str]) -> list[float]:
    if net is None:
        return []
    limits: set[float] = set()
    for ln in net.lines:
        if f"flow_{ln.name}" in columns:
            limits.update(v for v in (ln.flow_min, ln.flow_max) if math.isfinite(v))
    return sorted(limits)


def _ticks(lo: float, hi: float) -> np.ndarray:
    return np.linspace(lo, hi, N_TICKS + 1)


def _num(v: float) -> str:
    return format(float(v), ".4g")


def render_svg(table: Table, columns: list[str], limits: list[float] = ()) -> str:
    t = table.column("t")
    series = [table.column(c) for c in columns]
    finite = np.concatenate([s[np.isfinite(s)] for s in series] + [np.asarray(limits, dtype=float)])
    y_lo = float(finite.min()) if finite.size else 0.0
    y_hi = float(finite.max()) if finite.size else 1.0
    if y_hi - y_lo < 1e-12:
        y_lo, y_hi = y_lo - 0.5, y_hi + 0.5
    pad = 0.05 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - pad, y_hi + pad
    x_lo, x_hi = float(t[0]), float(t[-1])
    if x_hi <= x_lo:
        x_hi = x_lo + 1.0
    pw = WIDTH - MARGIN_L - MARGIN_R
    ph = HEIGHT - MARGIN_T - MARGIN_B

    def sx(v):
        return MARGIN_L + (v - x_lo) / (x_hi - x_lo) * pw

    def sy(v):
        return MARGIN_T + (y_hi - v) / (y_hi - y_lo) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for v in _ticks(x_lo, x_hi):
        x = sx(v)
        out.append(f'<line x1="{x:.2f}" y1="{MARGIN_T + ph}" x2="{x:.2f}" y2="{MARGIN_T + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{x:.2f}" y="{MARGIN_T + ph + 18}" font-size="11" text-anchor="middle">{_num(v)}</text>')
    for v in _ticks(y_lo, y_hi):
        y = sy(v)
        out.append(f'<line x1="{MARGIN_L - 5}" y1="{y:.2f}" x2="{MARGIN_L}" y2="{y:.2f}" stroke="black"/>')
        out.append(f'<text x="{MARGIN_L - 8}" y="{y + 4:.2f}" font-size="11" text-anchor="end">{_num(v)}</text>')
    out.append(f'<text x="{MARGIN_L + pw / 2:.1f}" y="{HEIGHT - 10}" font-size="13" text-anchor="middle">t [s]</text>')
    out.append(
        f'<text x="16" y="{MARGIN_T + ph / 2:.1f}" font-size="13" text-anchor="middle" '
        f'transform="rotate(-90 16 {MARGIN_T + ph / 2:.1f})">value</text>'
    )
    for lim in limits:
        y = sy(lim)
        out.append(
            f'<line class="limit" data-value="{_num(lim)}" x1="{MARGIN_L}" y1="{y:.2f}" x2="{MARGIN_L + pw}" y2="{y:.2f}" '
            f'stroke="gray" stroke-dasharray="6,4"/>'
        )
    for k, (name, s) in enumerate(zip(columns, series)):
        color = PALETTE[k % len(PALETTE)]
        ok = np.isfinite(s)
        pts = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(t[ok], s[ok]))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = MARGIN_T + 14 + 16 * k
        lx = MARGIN_L + pw + 10
        out.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 18}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 24}" y="{ly}" font-size="11">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot(trajectory: str | Path, selector: str, out: str | Path, net: NetworkModel | None = None) -> list[str]:
    table = read_table(trajectory)
    columns = select_columns(table, selector)
    Path(out).write_text(render_svg(table, columns, flow_limits(net, columns)), encoding="utf-8")
    return columns
