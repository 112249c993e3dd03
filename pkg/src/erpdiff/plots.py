"""Dependency-free SVG figures: metric curves, PLD bars, evoked overlays, covariance heatmaps."""
from __future__ import annotations

import datetime as _dt
from collections import OrderedDict
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .epochs import CLASS_NAMES, EpochSet
from .metrics.suite import ALL, MetricReport, MetricRow

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf")
PANEL_W, PANEL_H = 360, 240
MARGIN = 48


def _f(v: float) -> str:
    return f"{v:.2f}"


class Svg:
    def __init__(self, width: int, height: int, title: str = ""):
        self.width, self.height = width, height
        self.parts: list[str] = []
        if title:
            self.text(width / 2, 20, title, size=14, anchor="middle")

    def add(self, element: str):
        self.parts.append(element)

    def text(self, x, y, s, size=11, anchor="start", rotate=None):
        transform = f' transform="rotate({rotate} {_f(x)} {_f(y)})"' if rotate is not None else ""
        self.add(f'<text x="{_f(x)}" y="{_f(y)}" font-size="{size}" text-anchor="{anchor}"{transform}>'
                 f"{escape(str(s))}</text>")

    def line(self, x1, y1, x2, y2, stroke="#000", width=1.0, dash=None, cls=None):
        extra = f' stroke-dasharray="{dash}"' if dash else ""
        extra += f' class="{cls}"' if cls else ""
        self.add(f'<line x1="{_f(x1)}" y1="{_f(y1)}" x2="{_f(x2)}" y2="{_f(y2)}" stroke="{stroke}" '
                 f'stroke-width="{width}"{extra}/>')

    def rect(self, x, y, w, h, fill, opacity=1.0, cls=None, stroke=None):
        extra = f' class="{cls}"' if cls else ""
        extra += f' stroke="{stroke}"' if stroke else ""
        self.add(f'<rect x="{_f(x)}" y="{_f(y)}" width="{_f(w)}" height="{_f(h)}" fill="{fill}" '
                 f'fill-opacity="{opacity}"{extra}/>')

    @staticmethod
    def polyline(xs, ys, stroke, width=1.5) -> str:
        pts = " ".join(f"{_f(x)},{_f(y)}" for x, y in zip(xs, ys))
        return f'<polyline points="{pts}" fill="none" stroke="{stroke}" stroke-width="{width}"/>'

    @staticmethod
    def polygon(xs, ys, fill, opacity) -> str:
        pts = " ".join(f"{_f(x)},{_f(y)}" for x, y in zip(xs, ys))
        return f'<polygon points="{pts}" fill="{fill}" fill-opacity="{opacity}" stroke="none"/>'

    def render(self, deterministic: bool = False) -> str:
        head = ['<?xml version="1.0" encoding="UTF-8"?>']
        if not deterministic:
            head.append(f"<!-- generated {_dt.datetime.now().isoformat(timespec='seconds')} -->")
        head.append(f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.width}" height="{self.height}" '
                    f'viewBox="0 0 {self.width} {self.height}">')
        head.append(f'<rect width="{self.width}" height="{self.height}" fill="white"/>')
        return "\n".join(head + self.parts + ["</svg>", ""])

    def save(self, path, deterministic: bool = False) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.render(deterministic), encoding="utf-8", newline="")
        return path


class Axes:
    """Linear data-to-pixel mapping for one panel."""

    def __init__(self, svg: Svg, x0, y0, w, h, xlim, ylim):
        self.svg, self.x0, self.y0, self.w, self.h = svg, x0, y0, w, h
        self.xlim = _pad_limits(*xlim)
        self.ylim = _pad_limits(*ylim)

    def px(self, x):
        lo, hi = self.xlim
        return self.x0 + (np.asarray(x, dtype=float) - lo) / (hi - lo) * self.w

    def py(self, y):
        lo, hi = self.ylim
        return self.y0 + self.h - (np.asarray(y, dtype=float) - lo) / (hi - lo) * self.h

    def frame(self, title="", xlabel="", ylabel=""):
        s = self.svg
        s.rect(self.x0, self.y0, self.w, self.h, "none", stroke="#444")
        for v in np.linspace(*self.ylim, 3):
            s.text(self.x0 - 4, float(self.py(v)) + 4, f"{v:.3g}", size=9, anchor="end")
        for v in np.linspace(*self.xlim, 3):
            s.text(float(self.px(v)), self.y0 + self.h + 14, f"{v:.3g}", size=9, anchor="middle")
        if title:
            s.text(self.x0 + self.w / 2, self.y0 - 6, title, size=12, anchor="middle")
        if xlabel:
            s.text(self.x0 + self.w / 2, self.y0 + self.h + 30, xlabel, size=10, anchor="middle")
        if ylabel:
            s.text(self.x0 - 36, self.y0 + self.h / 2, ylabel, size=10, anchor="middle", rotate=-90)


def _pad_limits(lo: float, hi: float) -> tuple[float, float]:
    lo, hi = float(lo), float(hi)
    if not np.isfinite(lo) or not np.isfinite(hi):
        return 0.0, 1.0
    if hi - lo < 1e-12:
        span = abs(lo) * 0.1 or 1.0
        return lo - span, hi + span
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


def _grid(n_panels: int, cols: int) -> tuple[int, int]:
    cols = max(1, min(cols, n_panels))
    rows = (n_panels + cols - 1) // cols
    return cols, rows


# ----------------------------------------------------------------------
# metric-vs-step curves
# ----------------------------------------------------------------------

def plotted_rows(rows: Sequence[MetricRow]) -> list[MetricRow]:
    """Per metric, keep only the aggregate rows when the metric has any."""
    out = []
    metrics = OrderedDict.fromkeys(r.metric for r in rows)
    for m in metrics:
        mine = [r for r in rows if r.metric == m]
        agg = [r for r in mine if r.subject == ALL]
        out += agg if agg else mine
    return out


def metric_curves(report: MetricReport, path, deterministic: bool = False) -> Path:
    """One panel per metric; one ``<g class="series">`` per (subject, session, class scope, metric).

    The x axis is the training step (row order when steps are absent).
    Baselines are drawn as a shaded band spanning their range over steps.
    """
    rows = plotted_rows(report.rows)
    series: OrderedDict = OrderedDict()
    for i, r in enumerate(rows):
        key = (r.subject, r.session, r.class_scope, r.metric)
        series.setdefault(key, []).append((r.step if r.step is not None else i, r.value, r.baseline_value))
    metrics = list(OrderedDict.fromkeys(k[3] for k in series))
    cols, nrows = _grid(max(len(metrics), 1), 3)
    svg = Svg(cols * (PANEL_W + MARGIN) + MARGIN, nrows * (PANEL_H + 2 * MARGIN) + MARGIN, "metrics vs training step")
    for p, metric in enumerate(metrics):
        keys = [k for k in series if k[3] == metric]
        pts = [pt for k in keys for pt in series[k]]
        xs = [pt[0] for pt in pts]
        ys = [v for pt in pts for v in pt[1:] if np.isfinite(v)]
        ax = Axes(svg, MARGIN + (p % cols) * (PANEL_W + MARGIN), 2 * MARGIN + (p // cols) * (PANEL_H + 2 * MARGIN),
                  PANEL_W, PANEL_H, (min(xs), max(xs)), (min(ys, default=0), max(ys, default=1)))
        ax.frame(metric, "step", metric)
        for j, key in enumerate(keys):
            color = PALETTE[j % len(PALETTE)]
            data = sorted(series[key])
            svg.add(f'<g class="series" data-key="{escape("/".join(key))}">')
            base = [b for _, _, b in data if np.isfinite(b)]
            if base:
                lo, hi = min(base), max(base)
                y_hi, y_lo = float(ax.py(hi)), float(ax.py(lo))
                svg.rect(ax.x0, y_hi - 1, ax.w, max(y_lo - y_hi, 0) + 2, color, 0.15, cls="baseline-band")
            svg.add(Svg.polyline(ax.px([d[0] for d in data]), ax.py([d[1] for d in data]), color))
            for x, y, _ in data:
                svg.add(f'<circle cx="{_f(ax.px(x))}" cy="{_f(ax.py(y))}" r="2.5" fill="{color}"/>')
            svg.add("</g>")
            svg.text(ax.x0 + ax.w + 4, ax.y0 + 12 + 12 * j, "/".join(key[:3]), size=8)
    return svg.save(path, deterministic)


# ----------------------------------------------------------------------
# per-subject PLD bars
# ----------------------------------------------------------------------

def pld_bars(report: MetricReport, path, deterministic: bool = False) -> Path | None:
    """Bars of the per-subject PLD (ms, averaged over sessions) at the last step, baseline as a tick."""
    rows = [r for r in report.rows if r.metric == "PLD" and r.subject != ALL]
    if not rows:
        return None
    last = max((r.step for r in rows if r.step is not None), default=None)
    rows = [r for r in rows if r.step == last]
    subjects = sorted({r.subject for r in rows}, key=lambda s: (len(s), s))
    vals = [1000 * np.mean([r.value for r in rows if r.subject == s]) for s in subjects]
    bases = [1000 * np.nanmean([r.baseline_value for r in rows if r.subject == s])
             if any(np.isfinite(r.baseline_value) for r in rows if r.subject == s) else np.nan for s in subjects]
    svg = Svg(2 * MARGIN + PANEL_W, PANEL_H + 3 * MARGIN, "peak latency difference per subject")
    top = max([v for v in vals + bases if np.isfinite(v)] + [1.0])
    ax = Axes(svg, 1.5 * MARGIN, 2 * MARGIN, PANEL_W, PANEL_H, (-0.5, len(subjects) - 0.5), (0, top))
    ax.frame("", "subject", "PLD (ms)")
    bw = PANEL_W / max(len(subjects), 1) * 0.6
    for i, (s, v, b) in enumerate(zip(subjects, vals, bases)):
        x = float(ax.px(i))
        svg.add(f'<g class="bar" data-subject="{escape(s)}">')
        svg.rect(x - bw / 2, float(ax.py(v)), bw, float(ax.py(0) - ax.py(v)), PALETTE[0], 0.8)
        if np.isfinite(b):
            svg.line(x - bw / 2, float(ax.py(b)), x + bw / 2, float(ax.py(b)), stroke=PALETTE[1], width=2,
                     cls="baseline")
        svg.add("</g>")
        svg.text(x, ax.y0 + ax.h + 26, s, size=9, anchor="middle")
    return svg.save(path, deterministic)


# ----------------------------------------------------------------------
# evoked overlays and covariance heatmaps
# ----------------------------------------------------------------------

def evoked_overlay(real: EpochSet, gen: EpochSet, path, channels: Sequence[int] | None = None,
                   deterministic: bool = False) -> Path:
    """Mean response with a +-1 SD band for real and generated data, per class and channel."""
    channels = list(range(min(real.n_channels, 4))) if channels is None else list(channels)
    classes = sorted({int(c) for c in real.classes})
    t = np.arange(real.epoch_len) / real.fs
    cols, rows = len(channels), len(classes)
    svg = Svg(cols * (PANEL_W + MARGIN) + MARGIN, rows * (PANEL_H + 2 * MARGIN) + MARGIN,
              "averaged responses (band: +-1 SD)")
    for r, cls in enumerate(classes):
        stats = []
        for name, data in (("real", real), ("generated", gen)):
            x = data.subset(cls=cls).data.astype(np.float64)
            stats.append((name, x.mean(axis=0), x.std(axis=0)) if len(x) else None)
        for c, ch in enumerate(channels):
            valid = [s for s in stats if s is not None]
            lo = min(float(np.min(m[ch] - s[ch])) for _, m, s in valid)
            hi = max(float(np.max(m[ch] + s[ch])) for _, m, s in valid)
            ax = Axes(svg, MARGIN + c * (PANEL_W + MARGIN), 2 * MARGIN + r * (PANEL_H + 2 * MARGIN),
                      PANEL_W, PANEL_H, (t[0], t[-1]), (lo, hi))
            ax.frame(f"{real.layout.names[ch]} / {CLASS_NAMES[cls]}", "time (s)", "µV")
            for k, item in enumerate(stats):
                if item is None:
                    continue
                name, mean, std = item
                color = PALETTE[k]
                xs = ax.px(t)
                svg.add(f'<g class="evoked" data-source="{name}">')
                svg.add(Svg.polygon(np.concatenate([xs, xs[::-1]]),
                                    np.concatenate([ax.py(mean[ch] + std[ch]), ax.py((mean[ch] - std[ch])[::-1])]),
                                    color, 0.15))
                svg.add(Svg.polyline(xs, ax.py(mean[ch]), color))
                svg.add("</g>")
                svg.text(ax.x0 + ax.w - 4, ax.y0 + 12 + 12 * k, name, size=9, anchor="end")
    return svg.save(path, deterministic)


def _diverging(v: float, vmax: float) -> str:
    a = 0.0 if vmax <= 0 else float(np.clip(v / vmax, -1, 1))
    if a >= 0:
        r, g, b = 255, int(255 * (1 - a)), int(255 * (1 - a))
    else:
        r, g, b = int(255 * (1 + a)), int(255 * (1 + a)), 255
    return f"#{r:02x}{g:02x}{b:02x}"


def response_covariance(epochs: EpochSet, cls: int) -> np.ndarray:
    """Channel covariance (over time) of the class-averaged response."""
    ev = epochs.subset(cls=cls).data.astype(np.float64).mean(axis=0)
    return np.cov(ev)


def covariance_heatmaps(real: EpochSet, gen: EpochSet, path, deterministic: bool = False) -> Path:
    classes = sorted({int(c) for c in real.classes})
    size = 200
    svg = Svg(2 * (size + MARGIN) + MARGIN, len(classes) * (size + 2 * MARGIN) + MARGIN,
              "covariance of averaged responses")
    for r, cls in enumerate(classes):
        mats = [("real", response_covariance(real, cls))]
        if np.any(gen.classes == cls):
            mats.append(("generated", response_covariance(gen, cls)))
        vmax = max(float(np.max(np.abs(m))) for _, m in mats)
        for c, (name, m) in enumerate(mats):
            x0, y0 = MARGIN + c * (size + MARGIN), 2 * MARGIN + r * (size + 2 * MARGIN)
            n = m.shape[0]
            cell = size / n
            svg.add(f'<g class="heatmap" data-source="{name}">')
            for i in range(n):
                for j in range(n):
                    svg.rect(x0 + j * cell, y0 + i * cell, cell, cell, _diverging(m[i, j], vmax))
            svg.add("</g>")
            svg.text(x0 + size / 2, y0 - 6, f"{name} / {CLASS_NAMES[cls]}", size=11, anchor="middle")
    return svg.save(path, deterministic)
