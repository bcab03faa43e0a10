"""Minimal static SVG line charts.

Hand-rolled rather than delegated to a plotting library so that identical
inputs always produce byte-identical files (no embedded timestamps, hashes,
or library-version drift) and so tests can count elements directly.
"""

from __future__ import annotations

import math

PALETTE = (
    "#1f77b4",
    "#d62728",
    "#2ca02c",
    "#9467bd",
    "#ff7f0e",
    "#8c564b",
    "#17becf",
    "#7f7f7f",
)

_MARGIN_LEFT = 64
_MARGIN_RIGHT = 16
_MARGIN_TOP = 48
_MARGIN_BOTTOM = 48


def _fmt(x: float) -> str:
    """Stable short decimal rendering for coordinates and tick labels."""
    return f"{x:.6g}"


def _nice_ticks(lo: float, hi: float, target: int = 6) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    span = hi - lo
    raw = span / max(target - 1, 1)
    mag = 10.0 ** math.floor(math.log10(raw))
    for mult in (1.0, 2.0, 5.0, 10.0):
        if raw <= mult * mag:
            step = mult * mag
            break
    first = math.ceil(lo / step) * step
    ticks = []
    value = first
    while value <= hi + step * 1e-9:
        ticks.append(round(value / step) * step)
        value += step
    return ticks


def line_chart(
    series: list[tuple[str, list[float], list[float]]],
    title: str,
    xlabel: str,
    ylabel: str,
    subtitle: str = "",
    width: int = 760,
    height: int = 460,
) -> str:
    """Render labeled (x, y) series as one SVG document string."""
    if not series:
        raise ValueError("line_chart needs at least one series")
    for label, xs, ys in series:
        if len(xs) != len(ys) or len(xs) == 0:
            raise ValueError(f"series {label!r} must have equal, non-zero x/y lengths")

    x_lo = min(min(xs) for _, xs, _ in series)
    x_hi = max(max(xs) for _, xs, _ in series)
    y_lo = min(min(ys) for _, _, ys in series)
    y_hi = max(max(ys) for _, _, ys in series)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_lo, y_hi = y_lo - 0.5, y_hi + 0.5
    pad = 0.04 * (y_hi - y_lo)
    y_lo -= pad
    y_hi += pad

    plot_w = width - _MARGIN_LEFT - _MARGIN_RIGHT
    plot_h = height - _MARGIN_TOP - _MARGIN_BOTTOM

    def sx(x: float) -> float:
        return _MARGIN_LEFT + (x - x_lo) / (x_hi - x_lo) * plot_w

    def sy(y: float) -> float:
        return _MARGIN_TOP + (1.0 - (y - y_lo) / (y_hi - y_lo)) * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2}" y="20" font-family="sans-serif" font-size="15" '
        f'text-anchor="middle" font-weight="bold">{_escape(title)}</text>',
    ]
    if subtitle:
        parts.append(
            f'<text x="{width / 2}" y="38" font-family="sans-serif" font-size="11" '
            f'text-anchor="middle" fill="#555">{_escape(subtitle)}</text>'
        )

    # axes frame and ticks
    parts.append(
        f'<rect x="{_MARGIN_LEFT}" y="{_MARGIN_TOP}" width="{plot_w}" height="{plot_h}" '
        f'fill="none" stroke="#333" stroke-width="1"/>'
    )
    for tick in _nice_ticks(x_lo, x_hi):
        if not x_lo <= tick <= x_hi:
            continue
        x = sx(tick)
        parts.append(f'<line x1="{_fmt(x)}" y1="{_MARGIN_TOP + plot_h}" x2="{_fmt(x)}" y2="{_MARGIN_TOP + plot_h + 4}" stroke="#333"/>')
        parts.append(
            f'<text x="{_fmt(x)}" y="{_MARGIN_TOP + plot_h + 18}" font-family="sans-serif" '
            f'font-size="11" text-anchor="middle">{_fmt(tick)}</text>'
        )
    for tick in _nice_ticks(y_lo, y_hi):
        if not y_lo <= tick <= y_hi:
            continue
        y = sy(tick)
        parts.append(f'<line x1="{_MARGIN_LEFT - 4}" y1="{_fmt(y)}" x2="{_MARGIN_LEFT}" y2="{_fmt(y)}" stroke="#333"/>')
        parts.append(
            f'<text x="{_MARGIN_LEFT - 8}" y="{_fmt(y + 4)}" font-family="sans-serif" '
            f'font-size="11" text-anchor="end">{_fmt(tick)}</text>'
        )
        parts.append(
            f'<line x1="{_MARGIN_LEFT}" y1="{_fmt(y)}" x2="{_MARGIN_LEFT + plot_w}" y2="{_fmt(y)}" '
            f'stroke="#ddd" stroke-width="0.5"/>'
        )

    # data polylines
    for i, (label, xs, ys) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        points = " ".join(f"{_fmt(sx(x))},{_fmt(sy(y))}" for x, y in zip(xs, ys))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{points}"/>')

    # legend
    for i, (label, _, _) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        lx = _MARGIN_LEFT + 10
        ly = _MARGIN_TOP + 14 + 16 * i
        parts.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 18}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        parts.append(
            f'<text x="{lx + 24}" y="{ly + 4}" font-family="sans-serif" font-size="11">{_escape(label)}</text>'
        )

    parts.append(
        f'<text x="{_MARGIN_LEFT + plot_w / 2}" y="{height - 8}" font-family="sans-serif" '
        f'font-size="12" text-anchor="middle">{_escape(xlabel)}</text>'
    )
    parts.append(
        f'<text x="16" y="{_MARGIN_TOP + plot_h / 2}" font-family="sans-serif" font-size="12" '
        f'text-anchor="middle" transform="rotate(-90 16 {_MARGIN_TOP + plot_h / 2})">{_escape(ylabel)}</text>'
    )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _escape(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
