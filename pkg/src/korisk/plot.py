"""Self-contained SVG learning-curve plot: one log-log panel per image size.

Each architecture gets a min/max band over seeds (filled polygon), its
seed-mean curve (solid polyline) and the calibrated bound (dashed polyline).
Polylines carry ``data-n`` and ``data-y`` attributes with the exact values
plotted so the figure can be checked numerically.
"""

import math
from collections import defaultdict
from xml.sax.saxutils import escape

import numpy as np

from .calibrate import calibrated_bound
from .errors import InputError

PANEL_W, PANEL_H = 360, 280
MARGIN = dict(left=70, right=20, top=40, bottom=50)
COLORS = {"ko": "#1f77b4", "fc": "#d62728"}
LABELS = {"ko": "KO (operator-aware)", "fc": "FC (dense)"}


def _curves(records):
    """``{(h, arch): (ns, mean, lo, hi)}`` over the successful records."""
    by_cell = defaultdict(list)
    for r in records:
        if r.ok:
            by_cell[(r.h, r.arch, r.n)].append(r.test_err)
    grouped = defaultdict(dict)
    for (h, arch, n), errs in by_cell.items():
        grouped[(h, arch)][n] = errs
    out = {}
    for key, cells in grouped.items():
        ns = np.array(sorted(cells), dtype=float)
        vals = [cells[int(n)] for n in ns]
        out[key] = (ns, np.array([np.mean(v) for v in vals]),
                    np.array([min(v) for v in vals]), np.array([max(v) for v in vals]))
    return out


def _log_range(values):
    lo, hi = math.log10(min(values)), math.log10(max(values))
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


def _decade_ticks(lo, hi):
    return [10.0**k for k in range(math.ceil(lo), math.floor(hi) + 1)]


def _fmt(v):
    return f"{v:.17g}"


def _panel(h, curves, fits, ox, oy):
    x0, x1 = ox + MARGIN["left"], ox + PANEL_W - MARGIN["right"]
    y0, y1 = oy + MARGIN["top"], oy + PANEL_H - MARGIN["bottom"]
    archs = [a for a in ("ko", "fc") if (h, a) in curves]
    all_n = np.concatenate([curves[(h, a)][0] for a in archs])
    ys = []
    for a in archs:
        ns, mean, lo, hi = curves[(h, a)]
        ys.extend(lo)
        ys.extend(hi)
        ys.extend(calibrated_bound(fits[(a, h)], int(n)) for n in ns)
    ys = [y for y in ys if y > 0]
    if not ys:
        raise InputError(f"h={h}: no positive values to plot on a log axis")
    xlo, xhi = _log_range(all_n)
    ylo, yhi = _log_range(ys)
    floor_y = 10.0**ylo

    def px(n):
        return x0 + (math.log10(n) - xlo) / (xhi - xlo) * (x1 - x0)

    def py(y):
        return y1 - (math.log10(max(y, floor_y)) - ylo) / (yhi - ylo) * (y1 - y0)

    parts = [
        f'<g class="panel" data-h="{h}">',
        f'<rect x="{x0}" y="{y0}" width="{x1 - x0}" height="{y1 - y0}" fill="none" stroke="#333"/>',
        f'<text x="{(x0 + x1) / 2:.1f}" y="{oy + 24}" text-anchor="middle" font-size="14">H = {h}</text>',
        f'<text x="{(x0 + x1) / 2:.1f}" y="{y1 + 38}" text-anchor="middle" font-size="12">'
        "training samples N</text>",
        f'<text transform="translate({ox + 16},{(y0 + y1) / 2:.1f}) rotate(-90)" '
        'text-anchor="middle" font-size="12">test MSE</text>',
    ]
    for n in sorted(set(all_n)):
        parts.append(f'<text x="{px(n):.2f}" y="{y1 + 16}" text-anchor="middle" font-size="10">{int(n)}</text>')
    for t in _decade_ticks(ylo, yhi):
        parts.append(f'<line x1="{x0 - 4}" y1="{py(t):.2f}" x2="{x0}" y2="{py(t):.2f}" stroke="#333"/>')
        parts.append(f'<text x="{x0 - 6}" y="{py(t) + 3:.2f}" text-anchor="end" font-size="10">1e{round(math.log10(t))}</text>')
    for a in archs:
        ns, mean, lo, hi = curves[(h, a)]
        color = COLORS.get(a, "#555")
        band = [(px(n), py(v)) for n, v in zip(ns, hi)] + [(px(n), py(v)) for n, v in zip(ns[::-1], lo[::-1])]
        parts.append(
            f'<polygon class="band" data-arch="{a}" fill="{color}" fill-opacity="0.18" stroke="none" '
            f'points="{" ".join(f"{x:.2f},{y:.2f}" for x, y in band)}"/>'
        )
        bound = [calibrated_bound(fits[(a, h)], int(n)) for n in ns]
        for kind, values, dash in (("mean", mean, ""), ("bound", bound, ' stroke-dasharray="6,4"')):
            pts = " ".join(f"{px(n):.2f},{py(v):.2f}" for n, v in zip(ns, values))
            parts.append(
                f'<polyline class="{kind}" data-arch="{a}" '
                f'data-n="{" ".join(str(int(n)) for n in ns)}" '
                f'data-y="{" ".join(_fmt(float(v)) for v in values)}" '
                f'fill="none" stroke="{color}" stroke-width="1.8"{dash} points="{pts}"/>'
            )
    parts.append("</g>")
    return parts


def _legend(archs, x, y):
    parts = ['<g class="legend">']
    for i, a in enumerate(archs):
        color, yy = COLORS.get(a, "#555"), y + 18 * i
        label = escape(LABELS.get(a, a))
        parts += [
            f'<line x1="{x}" y1="{yy}" x2="{x + 24}" y2="{yy}" stroke="{color}" stroke-width="1.8"/>',
            f'<text x="{x + 30}" y="{yy + 4}" font-size="11">{label} mean, min/max band</text>',
            f'<line x1="{x + 240}" y1="{yy}" x2="{x + 264}" y2="{yy}" stroke="{color}" '
            'stroke-width="1.8" stroke-dasharray="6,4"/>',
            f'<text x="{x + 270}" y="{yy + 4}" font-size="11">calibrated bound</text>',
        ]
    parts.append("</g>")
    return parts


def render_svg(records, fits):
    """SVG text for sweep records and their calibration fits."""
    records = list(records)
    if not records:
        raise InputError("sweep is empty")
    curves = _curves(records)
    if not curves:
        raise InputError("sweep has no successful fits")
    fit_map = {(f.arch, f.h): f for f in fits}
    missing = sorted(set((a, h) for h, a in curves) - set(fit_map))
    extra = sorted(set(fit_map) - set((a, h) for h, a in curves))
    if missing or extra:
        raise InputError(f"sweep and calibration do not match (missing {missing}, extra {extra})")
    hs = sorted({h for h, _ in curves})
    archs = sorted({a for _, a in curves}, key=lambda a: (a != "ko", a))
    legend_h = 18 * len(archs) + 20
    width, height = PANEL_W * len(hs), PANEL_H + legend_h
    body = []
    for i, h in enumerate(hs):
        body += _panel(h, curves, fit_map, PANEL_W * i, 0)
    body += _legend(archs, MARGIN["left"], PANEL_H + 10)
    return "\n".join(
        [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif">',
            f'<rect width="{width}" height="{height}" fill="white"/>',
            *body,
            "</svg>",
            "",
        ]
    )


def emit_plot(sweep_csv, calibration_csv, out):
    """Render the plot from CSV files; nothing is written if the inputs are bad."""
    from .harness import read_calibration_csv, read_sweep_csv

    svg = render_svg(read_sweep_csv(sweep_csv), read_calibration_csv(calibration_csv))
    with open(out, "w") as fh:
        fh.write(svg)
    return out
