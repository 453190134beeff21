"""CSV tables and small hand-written SVG charts.

Every number goes through `format_cell`, so reruns with the same inputs
produce the same bytes.
"""
import csv
import math
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence
from xml.sax.saxutils import escape

import numpy as np

from ..core.evalkit import Table

PALETTE = ('#4c72b0', '#dd8452', '#55a868', '#c44e52', '#8172b3', '#937860', '#da8bc3', '#8c8c8c')


def format_cell(value) -> str:
    if value is None:
        return 'NA'
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, (float, np.floating)):
        if math.isinf(value):
            return 'inf' if value > 0 else '-inf'
        if math.isnan(value):
            return 'NA'
        return f"{float(value):.6f}"
    return str(value)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_cell(v) for v in row])
    return path


def write_table(path, table: Table) -> Path:
    return write_csv(path, table.header, table.rows)


def write_svg(path, svg: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(svg, encoding='utf-8')
    return path


def _n(v: float) -> str:
    return f"{v:.2f}"


def _frame(width: int, height: int, title: str, body: List[str]) -> str:
    head = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="#ffffff"/>',
        f'<text x="{width / 2:.0f}" y="20" text-anchor="middle" font-family="sans-serif" '
        f'font-size="14">{escape(title)}</text>',
    ]
    return '\n'.join(head + body + ['</svg>', ''])


def _legend(names: Sequence[str], x: float, y: float) -> List[str]:
    out = []
    for i, name in enumerate(names):
        yy = y + 16 * i
        out.append(f'<rect x="{_n(x)}" y="{_n(yy - 9)}" width="10" height="10" fill="{PALETTE[i % len(PALETTE)]}"/>')
        out.append(f'<text x="{_n(x + 14)}" y="{_n(yy)}" font-family="sans-serif" font-size="11">'
                   f'{escape(name)}</text>')
    return out


def bar_chart(title: str, groups: Sequence[str], series: Dict[str, Sequence[Optional[float]]],
              y_max: Optional[float] = None, width: int = 640, height: int = 320) -> str:
    """Grouped bars; missing values leave a gap"""
    left, right, top, bottom = 50, 140, 35, 40
    plot_w, plot_h = width - left - right, height - top - bottom
    values = [v for vs in series.values() for v in vs if v is not None and math.isfinite(v)]
    top_value = y_max if y_max is not None else (max(values) if values else 1.0) or 1.0
    body = [f'<line x1="{left}" y1="{top + plot_h}" x2="{left + plot_w}" y2="{top + plot_h}" stroke="#333"/>',
            f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" stroke="#333"/>']
    for k in range(5):
        frac = k / 4
        y = top + plot_h * (1 - frac)
        body.append(f'<text x="{left - 6}" y="{_n(y + 4)}" text-anchor="end" font-family="sans-serif" '
                    f'font-size="10">{top_value * frac:.2f}</text>')
    n_series = max(1, len(series))
    group_w = plot_w / max(1, len(groups))
    bar_w = group_w * 0.8 / n_series
    for gi, group in enumerate(groups):
        gx = left + gi * group_w + group_w * 0.1
        for si, (name, vs) in enumerate(series.items()):
            v = vs[gi] if gi < len(vs) else None
            if v is None or not math.isfinite(v):
                continue
            h = plot_h * min(max(v / top_value, 0.0), 1.0)
            body.append(f'<rect x="{_n(gx + si * bar_w)}" y="{_n(top + plot_h - h)}" width="{_n(bar_w)}" '
                        f'height="{_n(h)}" fill="{PALETTE[si % len(PALETTE)]}"/>')
        body.append(f'<text x="{_n(gx + group_w * 0.4)}" y="{top + plot_h + 16}" text-anchor="middle" '
                    f'font-family="sans-serif" font-size="11">{escape(group)}</text>')
    body.extend(_legend(list(series), left + plot_w + 16, top + 12))
    return _frame(width, height, title, body)


def line_chart(title: str, xs: Sequence[float], series: Dict[str, Sequence[float]],
               width: int = 640, height: int = 320) -> str:
    left, right, top, bottom = 50, 140, 35, 40
    plot_w, plot_h = width - left - right, height - top - bottom
    values = [v for vs in series.values() for v in vs if math.isfinite(v)]
    lo, hi = (min(values), max(values)) if values else (0.0, 1.0)
    if hi - lo < 1e-12:
        hi = lo + 1.0
    x_lo, x_hi = (min(xs), max(xs)) if len(xs) else (0.0, 1.0)
    x_span = (x_hi - x_lo) or 1.0

    def px(x):
        return left + plot_w * (x - x_lo) / x_span

    def py(y):
        return top + plot_h * (1 - (y - lo) / (hi - lo))

    body = [f'<line x1="{left}" y1="{top + plot_h}" x2="{left + plot_w}" y2="{top + plot_h}" stroke="#333"/>',
            f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" stroke="#333"/>',
            f'<text x="{left - 6}" y="{top + 4}" text-anchor="end" font-family="sans-serif" font-size="10">{hi:.3f}</text>',
            f'<text x="{left - 6}" y="{top + plot_h}" text-anchor="end" font-family="sans-serif" font-size="10">{lo:.3f}</text>']
    for si, (name, vs) in enumerate(series.items()):
        pts = ' '.join(f"{_n(px(x))},{_n(py(y))}" for x, y in zip(xs, vs) if math.isfinite(y))
        body.append(f'<polyline points="{pts}" fill="none" stroke="{PALETTE[si % len(PALETTE)]}" stroke-width="2"/>')
    body.extend(_legend(list(series), left + plot_w + 16, top + 12))
    return _frame(width, height, title, body)


def mask_image(title: str, grid: np.ndarray, kept: np.ndarray, dropped: np.ndarray, scale: int = 3) -> str:
    """Visible cells light, masked cells dark; retained points green, dropped points red"""
    h, w = grid.shape
    width, height = w * scale, h * scale + 30
    body = [f'<g transform="translate(0,30)">',
            f'<rect width="{w * scale}" height="{h * scale}" fill="#e8e8e8"/>']
    for y in range(h):
        row = grid[y]
        x = 0
        while x < w:
            if row[x] == 0:
                start = x
                while x < w and row[x] == 0:
                    x += 1
                body.append(f'<rect x="{start * scale}" y="{y * scale}" width="{(x - start) * scale}" '
                            f'height="{scale}" fill="#404040"/>')
            else:
                x += 1
    for pts, color in ((kept, '#2ca02c'), (dropped, '#d62728')):
        for u, v in pts:
            body.append(f'<circle cx="{_n(u * scale)}" cy="{_n(v * scale)}" r="1.5" fill="{color}"/>')
    body.append('</g>')
    return _frame(width, height, title, body)
