"""Deterministic SVG charts from the trace, sweep and moments CSVs.

Each input file becomes one panel. The schema is recognised from the header:

* norm trace: ``attn_frob`` against ``step``, one series per (activation, layer, head);
* sweep: mean accuracy against ``log10 k``, one series per ``N`` (diverged runs count as 0);
* moments: ``mean`` against ``N`` on log-log axes, one series per (quantity, p, scaled).

All numbers are written with fixed precision so identical input gives
byte-identical output.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

from ..attention import TRACE_FIELDS
from ..theory import MOMENT_FIELDS
from .runner import SWEEP_FIELDS

WIDTH = 640
PANEL_HEIGHT = 360
MARGIN = (60, 20, 40, 50)  # left, right, top, bottom
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


class ReportParseError(ValueError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = str(path)
        self.line = line


@dataclass
class Panel:
    title: str
    x_label: str
    y_label: str
    log_x: bool = False
    log_y: bool = False
    series: dict[str, list[tuple[float, float]]] = field(default_factory=dict)


def _float(path, line, text, name, allow_empty=False):
    if text == "" and allow_empty:
        return None
    try:
        return float(text)
    except ValueError:
        raise ReportParseError(path, line, f"{name} is not a number: {text!r}") from None


def _read_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return None, []
    return tuple(rows[0]), rows[1:]


def _check_width(path, rows, header):
    for i, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise ReportParseError(path, i, f"expected {len(header)} fields, got {len(row)}")


def _trace_panel(path, rows) -> Panel:
    panel = Panel(f"attention norm: {Path(path).name}", "step", "attn_frob")
    for i, row in enumerate(rows, start=2):
        step = _float(path, i, row[0], "step")
        attn = _float(path, i, row[3], "attn_frob")
        _float(path, i, row[4], "jac_frob", allow_empty=True)
        key = f"{row[5]} L{row[1]} H{row[2]}"
        panel.series.setdefault(key, []).append((step, attn))
    return panel


def _sweep_panel(path, rows) -> Panel:
    panel = Panel(f"accuracy vs scale: {Path(path).name}", "log10 k", "mean accuracy", log_x=True)
    cells: dict[tuple[int, float], list[float]] = {}
    for i, row in enumerate(rows, start=2):
        n = _float(path, i, row[0], "N")
        k = _float(path, i, row[1], "k")
        if k is None or k <= 0:
            raise ReportParseError(path, i, f"k must be positive, got {row[1]!r}")
        acc = _float(path, i, row[4], "accuracy", allow_empty=True)
        if row[5] not in ("true", "false"):
            raise ReportParseError(path, i, f"diverged must be true or false, got {row[5]!r}")
        cells.setdefault((int(n), k), []).append(0.0 if acc is None or row[5] == "true" else acc)
    for (n, k), accs in sorted(cells.items()):
        panel.series.setdefault(f"N={n}", []).append((k, sum(accs) / len(accs)))
    return panel


def _moments_panel(path, rows) -> Panel:
    panel = Panel(f"moments: {Path(path).name}", "log10 N", "log10 mean", log_x=True, log_y=True)
    idx = {name: j for j, name in enumerate(MOMENT_FIELDS)}
    for i, row in enumerate(rows, start=2):
        n = _float(path, i, row[idx["N"]], "N")
        mean = _float(path, i, row[idx["mean"]], "mean")
        if n <= 0 or mean <= 0:
            raise ReportParseError(path, i, "log axes need positive N and mean")
        key = f"{row[idx['quantity']]} p={row[idx['p']]} scaled={row[idx['scaled']]}"
        panel.series.setdefault(key, []).append((n, mean))
    for pts in panel.series.values():
        pts.sort()
    return panel


SCHEMAS = {
    tuple(TRACE_FIELDS): _trace_panel,
    tuple(SWEEP_FIELDS): _sweep_panel,
    tuple(MOMENT_FIELDS): _moments_panel,
}


def has_known_schema(path) -> bool:
    header, _ = _read_rows(path)
    return header is not None and header in SCHEMAS


def load_panel(path) -> Panel:
    header, rows = _read_rows(path)
    if header is None:
        return Panel(f"empty: {Path(path).name}", "", "")
    if header not in SCHEMAS:
        raise ReportParseError(path, 1, f"unrecognised header {','.join(header)!r}")
    _check_width(path, rows, header)
    return SCHEMAS[header](path, rows)


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi == lo:
        return [lo]
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def _label(x: float) -> str:
    text = f"{x:.3g}"
    return "0" if text == "-0" else text


def _panel_svg(panel: Panel, top: float) -> list[str]:
    left, right, pad_top, bottom = MARGIN
    x0, x1 = left, WIDTH - right
    y0, y1 = top + PANEL_HEIGHT - bottom, top + pad_top
    out = [f'<text x="{_fmt(WIDTH / 2)}" y="{_fmt(top + 24)}" text-anchor="middle" font-size="14">{escape(panel.title)}</text>']
    out.append(f'<line x1="{x0}" y1="{_fmt(y0)}" x2="{x1}" y2="{_fmt(y0)}" stroke="black"/>')
    out.append(f'<line x1="{x0}" y1="{_fmt(y0)}" x2="{x0}" y2="{_fmt(y1)}" stroke="black"/>')
    out.append(f'<text x="{_fmt((x0 + x1) / 2)}" y="{_fmt(y0 + 34)}" text-anchor="middle" font-size="12">{escape(panel.x_label)}</text>')
    out.append(f'<text x="14" y="{_fmt((y0 + y1) / 2)}" text-anchor="middle" font-size="12" '
               f'transform="rotate(-90 14 {_fmt((y0 + y1) / 2)})">{escape(panel.y_label)}</text>')

    def tx(v):
        return math.log10(v) if panel.log_x else v

    def ty(v):
        return math.log10(v) if panel.log_y else v

    pts = [(tx(x), ty(y)) for s in panel.series.values() for x, y in s]
    if not pts:
        return out
    xs, ys = [p[0] for p in pts], [p[1] for p in pts]
    xlo, xhi, ylo, yhi = min(xs), max(xs), min(ys), max(ys)
    if xhi == xlo:
        xlo, xhi = xlo - 1, xhi + 1
    if yhi == ylo:
        ylo, yhi = ylo - 1, yhi + 1

    def px(v):
        return x0 + (v - xlo) / (xhi - xlo) * (x1 - x0)

    def py(v):
        return y0 - (v - ylo) / (yhi - ylo) * (y0 - y1)

    for t in _ticks(xlo, xhi):
        out.append(f'<line x1="{_fmt(px(t))}" y1="{_fmt(y0)}" x2="{_fmt(px(t))}" y2="{_fmt(y0 + 4)}" stroke="black"/>')
        out.append(f'<text x="{_fmt(px(t))}" y="{_fmt(y0 + 16)}" text-anchor="middle" font-size="10">{_label(t)}</text>')
    for t in _ticks(ylo, yhi):
        out.append(f'<line x1="{x0 - 4}" y1="{_fmt(py(t))}" x2="{x0}" y2="{_fmt(py(t))}" stroke="black"/>')
        out.append(f'<text x="{x0 - 6}" y="{_fmt(py(t) + 3)}" text-anchor="end" font-size="10">{_label(t)}</text>')

    for j, (name, series) in enumerate(panel.series.items()):
        color = PALETTE[j % len(PALETTE)]
        coords = [(px(tx(x)), py(ty(y))) for x, y in series]
        if len(coords) > 1:
            joined = " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in coords)
            out.append(f'<polyline points="{joined}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        for a, b in coords:
            out.append(f'<circle cx="{_fmt(a)}" cy="{_fmt(b)}" r="2.5" fill="{color}"/>')
        out.append(f'<text x="{x1 - 4}" y="{_fmt(y1 + 12 * (j + 1))}" text-anchor="end" font-size="10" '
                   f'fill="{color}">{escape(name)}</text>')
    return out


def render_svg(panels: list[Panel]) -> str:
    height = PANEL_HEIGHT * max(len(panels), 1)
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{height}" fill="white"/>',
    ]
    for i, panel in enumerate(panels):
        lines += _panel_svg(panel, i * PANEL_HEIGHT)
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def render_report(csv_paths, out_svg) -> Path:
    """Read each CSV, draw one panel per file and write the SVG to ``out_svg``."""
    panels = [load_panel(p) for p in csv_paths]
    out = Path(out_svg)
    out.write_text(render_svg(panels), encoding="utf-8")
    return out
