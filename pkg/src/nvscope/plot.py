"""Dependency-free SVG line charts of ODMR spectra."""
from __future__ import annotations

import math
from typing import Optional, Sequence
from xml.sax.saxutils import escape

from .controller import baseline_adjust
from .spectrum import Spectrum

COLORS = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728")
WIDTH, HEIGHT = 800, 480
MARGIN = dict(left=70, right=20, top=30, bottom=55)


def _nice_ticks(lo: float, hi: float, target: int = 6) -> list[float]:
    span = hi - lo
    if span <= 0:
        return [lo]
    raw = span / target
    mag = 10 ** math.floor(math.log10(raw))
    step = next(m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw)
    first = math.ceil(lo / step - 1e-9) * step
    ticks = []
    t = first
    while t <= hi + 1e-9 * span:
        ticks.append(round(t, 10))
        t += step
    return ticks


def _fmt(v: float) -> str:
    text = f"{v:.2f}".rstrip("0").rstrip(".")
    return "0" if text == "-0" else text


def render_svg(
    spectra: Sequence[Spectrum],
    labels: Optional[Sequence[str]] = None,
    centers_mhz: Sequence[float] = (),
    title: str = "ODMR spectrum",
) -> str:
    """Overlay up to four spectra on a noise-adjusted millivolt scale.

    Raw spectra are baseline-adjusted first. The second and later traces are
    dashed; ``centers_mhz`` (e.g. fitted dip centres) are drawn as markers.
    """
    if not spectra:
        raise ValueError("nothing to plot")
    if len(spectra) > len(COLORS):
        raise ValueError(f"at most {len(COLORS)} traces")
    labels = list(labels) if labels else [f"trace {i + 1}" for i in range(len(spectra))]
    traces = [s if s.meta.baseline_applied else baseline_adjust(s) for s in spectra]

    x_min = min(float(t.frequencies[0]) for t in traces)
    x_max = max(float(t.frequencies[-1]) for t in traces)
    y_all = [v for t in traces for v in t.signals]
    y_lo, y_hi = min(y_all), max(y_all)
    pad = 0.05 * (y_hi - y_lo) if y_hi > y_lo else 1.0
    y_lo, y_hi = y_lo - pad, y_hi + pad

    left, top = MARGIN["left"], MARGIN["top"]
    pw = WIDTH - left - MARGIN["right"]
    ph = HEIGHT - top - MARGIN["bottom"]

    def sx(x: float) -> float:
        return left + (x - x_min) / (x_max - x_min) * pw if x_max > x_min else left + pw / 2

    def sy(y: float) -> float:
        return top + (y_hi - y) / (y_hi - y_lo) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.1f}" y="18" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<g id="plot-area" data-x-min="{_fmt(x_min)}" data-x-max="{_fmt(x_max)}" '
        f'data-y-min="{_fmt(y_lo)}" data-y-max="{_fmt(y_hi)}">',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    x_ticks = sorted({x_min, x_max, *[t for t in _nice_ticks(x_min, x_max) if x_min < t < x_max]})
    for t in x_ticks:
        x = sx(t)
        out.append(f'<line class="x-tick" x1="{x:.2f}" y1="{top + ph}" x2="{x:.2f}" y2="{top + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{x:.2f}" y="{top + ph + 18}" text-anchor="middle">{_fmt(t)}</text>')
    for t in _nice_ticks(y_lo, y_hi):
        y = sy(t)
        out.append(f'<line class="y-tick" x1="{left - 5}" y1="{y:.2f}" x2="{left}" y2="{y:.2f}" stroke="black"/>')
        out.append(f'<text x="{left - 8}" y="{y + 4:.2f}" text-anchor="end">{_fmt(t)}</text>')
    out.append(
        f'<text x="{left + pw / 2:.1f}" y="{HEIGHT - 12}" text-anchor="middle">Frequency (MHz)</text>'
    )
    out.append(
        f'<text transform="translate(16 {top + ph / 2:.1f}) rotate(-90)" text-anchor="middle">'
        "Noise-adjusted signal (mV)</text>"
    )

    for i, trace in enumerate(traces):
        pts = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(trace.frequencies, trace.signals))
        dash = ' stroke-dasharray="6 4"' if i > 0 else ""
        out.append(
            f'<polyline class="trace" points="{pts}" fill="none" stroke="{COLORS[i]}" stroke-width="1.5"{dash}/>'
        )
    for c in centers_mhz:
        if x_min <= c <= x_max:
            x = sx(c)
            out.append(
                f'<line class="fit-center" x1="{x:.2f}" y1="{top}" x2="{x:.2f}" y2="{top + ph}" '
                'stroke="gray" stroke-dasharray="2 3"/>'
            )
            out.append(f'<text x="{x + 3:.2f}" y="{top + 12}" fill="gray">{_fmt(c)}</text>')

    lx, ly = left + pw - 150, top + 10
    out.append(f'<g id="legend"><rect x="{lx}" y="{ly}" width="140" height="{18 * len(traces) + 8}" fill="white" stroke="#999"/>')
    for i, label in enumerate(labels):
        y = ly + 16 + 18 * i
        dash = ' stroke-dasharray="6 4"' if i > 0 else ""
        out.append(f'<line x1="{lx + 8}" y1="{y - 4}" x2="{lx + 36}" y2="{y - 4}" stroke="{COLORS[i]}" stroke-width="1.5"{dash}/>')
        out.append(f'<text x="{lx + 42}" y="{y}">{escape(label)}</text>')
    out.append("</g>")
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"
