"""Standalone SVG figures for simulation output.

Hand-rolled SVG so the package carries no plotting dependency. Figures are
presentational: a bar-panel chart of study metrics by method, and an
overlaid histogram of true versus reported counts that makes heaping
spikes visible.
"""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

__all__ = ["metrics_panels_svg", "heap_histogram_svg"]

_PANEL_W = 420
_PANEL_H = 260
_MARGIN = 55

_METRIC_LABELS = {
    "bias_pct": "Empirical bias (%)",
    "coverage_pct": "95% CI coverage (%)",
    "ser": "SE ratio (median est. / empirical)",
    "mse": "Median estimated SE",
    "ese": "Empirical SE",
}


def _bar_panel(x0, y0, labels, values, title, reference=None):
    parts = [f'<g class="panel" transform="translate({x0},{y0})">']
    parts.append(
        f'<text x="{_PANEL_W / 2}" y="16" text-anchor="middle" '
        f'font-size="13" font-weight="bold">{escape(title)}</text>')
    plot_w = _PANEL_W - 2 * _MARGIN
    plot_h = _PANEL_H - 2 * _MARGIN
    finite = [v for v in values if v is not None and np.isfinite(v)]
    vmax = max(finite + [0.0, reference or 0.0]) if finite else 1.0
    vmin = min(finite + [0.0, reference or 0.0]) if finite else 0.0
    if vmax == vmin:
        vmax = vmin + 1.0
    span = vmax - vmin

    def ypix(v):
        return _MARGIN + plot_h * (1.0 - (v - vmin) / span)

    parts.append(
        f'<line x1="{_MARGIN}" y1="{_MARGIN}" x2="{_MARGIN}" '
        f'y2="{_MARGIN + plot_h}" stroke="black"/>')
    parts.append(
        f'<line x1="{_MARGIN}" y1="{ypix(0)}" x2="{_MARGIN + plot_w}" '
        f'y2="{ypix(0)}" stroke="black"/>')
    if reference is not None:
        parts.append(
            f'<line x1="{_MARGIN}" y1="{ypix(reference)}" '
            f'x2="{_MARGIN + plot_w}" y2="{ypix(reference)}" '
            'stroke="gray" stroke-dasharray="4,3"/>')
    for frac in (0.0, 0.5, 1.0):
        v = vmin + frac * span
        parts.append(
            f'<text x="{_MARGIN - 6}" y="{ypix(v) + 4}" text-anchor="end" '
            f'font-size="10">{v:.3g}</text>')

    k = max(len(values), 1)
    slot = plot_w / k
    bar_w = slot * 0.6
    for i, (lab, val) in enumerate(zip(labels, values)):
        xc = _MARGIN + slot * (i + 0.5)
        if val is not None and np.isfinite(val):
            top = min(ypix(val), ypix(0))
            height = abs(ypix(val) - ypix(0))
            parts.append(
                f'<rect x="{xc - bar_w / 2}" y="{top}" width="{bar_w}" '
                f'height="{max(height, 0.5)}" fill="steelblue" opacity="0.85"/>')
        parts.append(
            f'<text x="{xc}" y="{_MARGIN + plot_h + 14}" text-anchor="middle" '
            f'font-size="9" transform="rotate(25 {xc} {_MARGIN + plot_h + 14})">'
            f'{escape(lab)}</text>')
    parts.append("</g>")
    return "\n".join(parts)


def metrics_panels_svg(frame, metrics=("bias_pct", "coverage_pct"),
                       title: str = "") -> str:
    """One bar panel per requested metric, rows keyed by method and weights.

    ``frame`` is the metrics table from the study harness (one row per
    method/weight-treatment cell).
    """
    labels = []
    for _, row in frame.iterrows():
        lab = str(row["method"])
        if row.get("weight_treatment") not in (None, "", "n/a"):
            lab += f" ({row['weight_treatment']})"
        if row.get("misspec") not in (None, "", "none"):
            lab += f" {row['misspec']}"
        labels.append(lab)

    width = _PANEL_W * len(metrics)
    height = _PANEL_H + (26 if title else 0)
    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}" '
        'font-family="sans-serif">',
    ]
    y0 = 0
    if title:
        parts.append(
            f'<text x="{width / 2}" y="18" text-anchor="middle" '
            f'font-size="15" font-weight="bold">{escape(title)}</text>')
        y0 = 26
    ref = {"coverage_pct": 95.0, "bias_pct": 0.0, "ser": 1.0}
    for j, metric in enumerate(metrics):
        vals = [None if v is None or (isinstance(v, float) and not np.isfinite(v))
                else float(v) for v in frame[metric]]
        parts.append(_bar_panel(j * _PANEL_W, y0, labels, vals,
                                _METRIC_LABELS.get(metric, metric),
                                reference=ref.get(metric)))
    parts.append("</svg>")
    return "\n".join(parts)


def heap_histogram_svg(y_true, y_reported, title: str = "True vs reported counts") -> str:
    """Overlaid histograms of true and reported counts (unit bins)."""
    y_true = np.asarray(y_true, dtype=int)
    y_reported = np.asarray(y_reported, dtype=int)
    top = int(max(y_true.max(initial=0), y_reported.max(initial=0))) + 1
    bins = np.arange(top + 1)
    c_true = np.bincount(y_true, minlength=top)
    c_rep = np.bincount(y_reported, minlength=top)
    cmax = max(c_true.max(initial=1), c_rep.max(initial=1))

    width, height = 640, 320
    margin = 50
    plot_w, plot_h = width - 2 * margin, height - 2 * margin
    bw = plot_w / top

    def bar(i, count, color, opacity):
        h = plot_h * count / cmax
        x = margin + i * bw
        yy = margin + plot_h - h
        return (f'<rect x="{x:.2f}" y="{yy:.2f}" width="{bw:.2f}" '
                f'height="{h:.2f}" fill="{color}" opacity="{opacity}"/>')

    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}" '
        'font-family="sans-serif">',
        f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="14" '
        f'font-weight="bold">{escape(title)}</text>',
        f'<g class="panel">',
    ]
    for i in range(top):
        if c_true[i]:
            parts.append(bar(i, c_true[i], "steelblue", 0.8))
        if c_rep[i]:
            parts.append(bar(i, c_rep[i], "gray", 0.55))
    parts.append(
        f'<line x1="{margin}" y1="{margin + plot_h}" x2="{margin + plot_w}" '
        f'y2="{margin + plot_h}" stroke="black"/>')
    for tick in range(0, top, max(1, top // 8)):
        x = margin + tick * bw
        parts.append(
            f'<text x="{x:.1f}" y="{margin + plot_h + 16}" text-anchor="middle" '
            f'font-size="10">{tick}</text>')
    parts.append(
        f'<text x="{width - margin}" y="{margin - 8}" text-anchor="end" '
        'font-size="11">'
        '<tspan fill="steelblue">true</tspan> / <tspan fill="gray">reported</tspan>'
        '</text>')
    parts.append("</g>")
    parts.append(f'<text x="12" y="{margin}" font-size="10" '
                 f'transform="rotate(-90 12 {margin})">count</text>')
    parts.append("</svg>")
    return "\n".join(parts)
