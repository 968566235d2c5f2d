"""Tiny dependency-free SVG renderer: polyline charts and bar charts.

CSV/JSONL stay the interchange formats; these plots are quick-look artifacts
written into run directories.
"""

from __future__ import annotations


def _axis_ticks(lo: float, hi: float, n: int = 5):
    if hi <= lo:
        hi = lo + 1.0
    span = hi - lo
    return [lo + span * i / (n - 1) for i in range(n)]


class SvgCanvas:
    def __init__(self, width=640, height=400, margin=60):
        self.w = width
        self.h = height
        self.m = margin
        self.parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
                      f'height="{height}" viewBox="0 0 {width} {height}">',
                      f'<rect width="{width}" height="{height}" fill="white"/>']

    def text(self, x, y, s, size=12, anchor="middle", rotate=None):
        t = f'transform="rotate(-90 {x} {y})" ' if rotate else ""
        self.parts.append(f'<text x="{x}" y="{y}" {t}font-size="{size}" '
                          f'text-anchor="{anchor}" font-family="sans-serif">{s}</text>')

    def line(self, x1, y1, x2, y2, color="#888", width=1):
        self.parts.append(f'<line x1="{x1:.1f}" y1="{y1:.1f}" x2="{x2:.1f}" '
                          f'y2="{y2:.1f}" stroke="{color}" stroke-width="{width}"/>')

    def polyline(self, pts, color="#1f6fb2", width=1.5):
        s = " ".join(f"{x:.1f},{y:.1f}" for x, y in pts)
        self.parts.append(f'<polyline points="{s}" fill="none" stroke="{color}" '
                          f'stroke-width="{width}"/>')

    def rect(self, x, y, w, h, color="#1f6fb2"):
        self.parts.append(f'<rect x="{x:.1f}" y="{y:.1f}" width="{w:.1f}" '
                          f'height="{h:.1f}" fill="{color}"/>')

    def to_string(self) -> str:
        return "\n".join(self.parts + ["</svg>"])

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_string())


PALETTE = ("#1f6fb2", "#d1495b", "#66a182", "#edae49", "#775b9f", "#3a3a3a")


def line_chart(path, series: dict, title="", xlabel="", ylabel="",
               width=640, height=400):
    """series: name -> (xs, ys)."""
    c = SvgCanvas(width, height)
    m = c.m
    xs_all = [x for xs, _ in series.values() for x in xs]
    ys_all = [y for _, ys in series.values() for y in ys if y == y]
    if not xs_all:
        xs_all, ys_all = [0, 1], [0, 1]
    x_lo, x_hi = min(xs_all), max(xs_all)
    y_lo, y_hi = min(ys_all), max(ys_all)
    if x_hi == x_lo:
        x_hi = x_lo + 1
    if y_hi == y_lo:
        y_hi = y_lo + 1
    pad = 0.05 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - pad, y_hi + pad

    def px(x):
        return m + (x - x_lo) / (x_hi - x_lo) * (c.w - 2 * m)

    def py(y):
        return c.h - m - (y - y_lo) / (y_hi - y_lo) * (c.h - 2 * m)

    for t in _axis_ticks(y_lo, y_hi):
        c.line(m, py(t), c.w - m, py(t), color="#eee")
        c.text(m - 8, py(t) + 4, f"{t:.3g}", size=10, anchor="end")
    for t in _axis_ticks(x_lo, x_hi):
        c.text(px(t), c.h - m + 16, f"{t:.3g}", size=10)
    c.line(m, c.h - m, c.w - m, c.h - m, color="#333")
    c.line(m, m, m, c.h - m, color="#333")
    for k, (name, (xs, ys)) in enumerate(series.items()):
        color = PALETTE[k % len(PALETTE)]
        pts = [(px(x), py(y)) for x, y in zip(xs, ys) if y == y]
        if pts:
            c.polyline(pts, color=color)
        c.text(c.w - m, m + 14 * (k + 1), name, size=11, anchor="end")
        c.line(c.w - m - 100, m + 14 * (k + 1) - 4, c.w - m - 80, m + 14 * (k + 1) - 4,
               color=color, width=2)
    c.text(c.w / 2, m / 2, title, size=14)
    c.text(c.w / 2, c.h - 12, xlabel, size=11)
    c.text(16, c.h / 2, ylabel, size=11, rotate=True)
    c.save(path)


def bar_chart(path, labels, values, title="", ylabel="", width=640, height=400):
    c = SvgCanvas(width, height)
    m = c.m
    v_hi = max(max(values), 1e-12)
    def py(v):
        return c.h - m - v / v_hi * (c.h - 2 * m)
    for t in _axis_ticks(0.0, v_hi):
        c.line(m, py(t), c.w - m, py(t), color="#eee")
        c.text(m - 8, py(t) + 4, f"{t:.3g}", size=10, anchor="end")
    span = (c.w - 2 * m) / max(len(values), 1)
    for i, (lab, v) in enumerate(zip(labels, values)):
        x = m + i * span + 0.15 * span
        c.rect(x, py(v), 0.7 * span, (c.h - m) - py(v), color=PALETTE[i % len(PALETTE)])
        c.text(m + (i + 0.5) * span, c.h - m + 16, str(lab), size=10)
    c.line(m, c.h - m, c.w - m, c.h - m, color="#333")
    c.text(c.w / 2, m / 2, title, size=14)
    c.text(16, c.h / 2, ylabel, size=11, rotate=True)
    c.save(path)
