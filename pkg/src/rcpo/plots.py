"""Self-contained SVG line charts of summary.csv: mean curve and +/- 1 std band per algorithm."""

from __future__ import annotations

import math
import os
from pathlib import Path
from xml.sax.saxutils import escape

from .harness import read_config_echo, read_summary, read_trace

COLORS = {"RCPO": "#d62728", "CPO": "#9467bd", "PCPO": "#1f77b4", "RVI": "#2ca02c"}
WIDTH, HEIGHT = 640, 400
MARGIN = dict(left=70, right=120, top=40, bottom=50)
PANELS = (("reward", "robust_reward_raw", "Robust reward"), ("utility", "robust_utility_raw", "Robust utility"))


def _nice_ticks(lo: float, hi: float, count: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / count
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=10 * mag)
    start = math.ceil(lo / step) * step
    ticks = []
    t = start
    while t <= hi + 1e-9 * step:
        ticks.append(round(t, 12))
        t += step
    return ticks


def render_panel(
    series: dict[str, tuple[list[int], list[float], list[float]]],
    title: str,
    ylabel: str,
    threshold: float | None = None,
) -> str:
    """SVG text for one panel; ``series`` maps algorithm -> (iterations, means, stds)."""
    xs = [x for it, _, _ in series.values() for x in it]
    lows = [m - s for _, ms, ss in series.values() for m, s in zip(ms, ss)]
    highs = [m + s for _, ms, ss in series.values() for m, s in zip(ms, ss)]
    if threshold is not None:
        lows.append(threshold)
        highs.append(threshold)
    x0, x1 = min(xs), max(xs)
    if x1 == x0:
        x1 = x0 + 1
    y0, y1 = min(lows), max(highs)
    pad = 0.05 * (y1 - y0) if y1 > y0 else 1.0
    y0, y1 = y0 - pad, y1 + pad
    left, top = MARGIN["left"], MARGIN["top"]
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def sx(x):
        return left + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return top + (1.0 - (y - y0) / (y1 - y0)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<text x="{WIDTH / 2:.1f}" y="22" text-anchor="middle" font-family="sans-serif" font-size="15">{escape(title)}</text>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for t in _nice_ticks(y0, y1):
        out.append(f'<line x1="{left - 4}" y1="{sy(t):.2f}" x2="{left}" y2="{sy(t):.2f}" stroke="black"/>')
        out.append(f'<text x="{left - 7}" y="{sy(t) + 4:.2f}" text-anchor="end" font-family="sans-serif" font-size="11">{t:g}</text>')
    for t in _nice_ticks(x0, x1):
        out.append(f'<line x1="{sx(t):.2f}" y1="{top + ph}" x2="{sx(t):.2f}" y2="{top + ph + 4}" stroke="black"/>')
        out.append(f'<text x="{sx(t):.2f}" y="{top + ph + 17}" text-anchor="middle" font-family="sans-serif" font-size="11">{t:g}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{HEIGHT - 10}" text-anchor="middle" font-family="sans-serif" font-size="12">iteration</text>')
    out.append(
        f'<text x="16" y="{top + ph / 2:.1f}" text-anchor="middle" font-family="sans-serif" font-size="12" '
        f'transform="rotate(-90 16 {top + ph / 2:.1f})">{escape(ylabel)}</text>'
    )
    for i, (name, (its, means, stds)) in enumerate(series.items()):
        color = COLORS.get(name, "#7f7f7f")
        upper = [f"{sx(x):.2f},{sy(m + s):.2f}" for x, m, s in zip(its, means, stds)]
        lower = [f"{sx(x):.2f},{sy(m - s):.2f}" for x, m, s in reversed(list(zip(its, means, stds)))]
        out.append(f'<polygon class="band" data-algorithm="{escape(name)}" points="{" ".join(upper + lower)}" fill="{color}" fill-opacity="0.2" stroke="none"/>')
        line = " ".join(f"{sx(x):.2f},{sy(m):.2f}" for x, m in zip(its, means))
        out.append(f'<polyline class="mean" data-algorithm="{escape(name)}" points="{line}" fill="none" stroke="{color}" stroke-width="2"/>')
        ly = top + 14 + 18 * i
        out.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 30}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 35}" y="{ly + 4}" font-family="sans-serif" font-size="12">{escape(name)}</text>')
    if threshold is not None:
        y = sy(threshold)
        out.append(
            f'<line id="threshold" class="threshold" data-value="{threshold:.17g}" x1="{left}" y1="{y:.2f}" x2="{left + pw}" y2="{y:.2f}" '
            'stroke="black" stroke-dasharray="6,4" stroke-width="1.5"/>'
        )
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_plots(trace_dir: str | os.PathLike) -> list[Path]:
    """Write ``<env>_reward.svg`` and ``<env>_utility.svg`` into ``trace_dir``; returns their paths."""
    trace_dir = Path(trace_dir)
    if not read_trace(trace_dir / "trace.csv"):
        raise ValueError(f"{trace_dir}: trace.csv has no rows")
    summary = read_summary(trace_dir / "summary.csv")
    if not summary:
        raise ValueError(f"{trace_dir}: summary.csv has no rows")
    echo = read_config_echo(trace_dir)
    env = echo["experiment"]["env"] if echo else "experiment"
    threshold = float(echo["env"]["threshold"]) if echo else None
    panels = []
    for suffix, metric, label in PANELS:
        series: dict[str, tuple[list[int], list[float], list[float]]] = {}
        for row in summary:
            if row["metric"] != metric:
                continue
            its, means, stds = series.setdefault(row["algorithm"], ([], [], []))
            its.append(int(row["iteration"]))
            means.append(float(row["mean"]))
            stds.append(float(row["std"]))
        if not series:
            raise ValueError(f"{trace_dir}: summary.csv lacks metric {metric}")
        svg = render_panel(series, f"{env}: {label.lower()}", f"{label} (raw scale)", threshold if suffix == "utility" else None)
        panels.append((trace_dir / f"{env}_{suffix}.svg", svg))
    # write only after both panels rendered, so a bad input leaves no partial output
    for path, svg in panels:
        path.write_text(svg, encoding="utf-8")
    return [path for path, _ in panels]
