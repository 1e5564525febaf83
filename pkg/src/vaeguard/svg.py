"""Minimal SVG emitter for the report figures: axes, polylines and bars.

Every plotted number is also written as a ``data-value`` attribute holding its
``repr``, so a figure can be checked against the CSV it was drawn from.
"""

from __future__ import annotations

from xml.sax.saxutils import escape

WIDTH, HEIGHT = 480, 320
MARGIN = (56, 20, 40, 48)  # left, right, top, bottom
COLOURS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")


def _fmt(v: float) -> str:
    return f"{v:.2f}"


class _Canvas:
    def __init__(self, title, x_label, y_label, y_range):
        self.parts = []
        self.y0, self.y1 = y_range
        if self.y1 <= self.y0:
            self.y1 = self.y0 + 1.0
        left, right, top, bottom = MARGIN
        self.box = (left, top, WIDTH - right, HEIGHT - bottom)
        self.parts.append(f'<text x="{WIDTH / 2:.1f}" y="20" text-anchor="middle" '
                          f'font-size="14">{escape(title)}</text>')
        x0, y0, x1, y1 = self.box
        self.parts.append(f'<line x1="{x0}" y1="{y1}" x2="{x1}" y2="{y1}" stroke="black"/>')
        self.parts.append(f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>')
        self.parts.append(f'<text x="{(x0 + x1) / 2:.1f}" y="{HEIGHT - 8}" text-anchor="middle" '
                          f'font-size="12">{escape(x_label)}</text>')
        self.parts.append(f'<text x="14" y="{(y0 + y1) / 2:.1f}" text-anchor="middle" font-size="12" '
                          f'transform="rotate(-90 14 {(y0 + y1) / 2:.1f})">{escape(y_label)}</text>')
        for k in range(5):
            v = self.y0 + (self.y1 - self.y0) * k / 4
            y = self.py(v)
            self.parts.append(f'<line x1="{x0 - 4}" y1="{y:.2f}" x2="{x0}" y2="{y:.2f}" stroke="black"/>')
            self.parts.append(f'<text x="{x0 - 6}" y="{y + 4:.2f}" text-anchor="end" '
                              f'font-size="10">{_fmt(v)}</text>')

    def py(self, v):
        x0, y0, x1, y1 = self.box
        return y1 - (v - self.y0) / (self.y1 - self.y0) * (y1 - y0)

    def render(self) -> str:
        body = "\n".join(self.parts)
        return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
                f'viewBox="0 0 {WIDTH} {HEIGHT}">\n{body}\n</svg>\n')


def bar_chart(labels, series: dict, title: str, y_label: str, errors: dict | None = None,
              y_range=(0.0, 1.0)) -> str:
    """Grouped bars: one group per label, one bar per series."""
    c = _Canvas(title, "", y_label, y_range)
    x0, _, x1, y1 = c.box
    labels = list(labels)
    names = list(series)
    group = (x1 - x0) / max(len(labels), 1)
    width = 0.8 * group / max(len(names), 1)
    for gi, label in enumerate(labels):
        gx = x0 + gi * group + 0.1 * group
        c.parts.append(f'<text x="{x0 + (gi + 0.5) * group:.2f}" y="{y1 + 16}" text-anchor="middle" '
                       f'font-size="11">{escape(str(label))}</text>')
        for si, name in enumerate(names):
            v = float(series[name][gi])
            top = c.py(max(min(v, c.y1), c.y0))
            bx = gx + si * width
            c.parts.append(f'<rect x="{bx:.2f}" y="{top:.2f}" width="{width:.2f}" '
                           f'height="{max(y1 - top, 0.0):.2f}" fill="{COLOURS[si % len(COLOURS)]}" '
                           f'data-series="{escape(name)}" data-label="{escape(str(label))}" '
                           f'data-value="{v!r}"/>')
            if errors and name in errors:
                e = float(errors[name][gi])
                cx = bx + width / 2
                c.parts.append(f'<line x1="{cx:.2f}" y1="{c.py(v - e):.2f}" x2="{cx:.2f}" '
                               f'y2="{c.py(v + e):.2f}" stroke="black" data-error="{e!r}"/>')
    _legend(c, names)
    return c.render()


def line_chart(xs, series: dict, title: str, x_label: str, y_label: str,
               y_range=(0.0, 1.0)) -> str:
    """One polyline per series over shared x values, with point markers."""
    c = _Canvas(title, x_label, y_label, y_range)
    x0, _, x1, y1 = c.box
    xs = [float(x) for x in xs]
    lo, hi = min(xs), max(xs)
    span = hi - lo or 1.0

    def px(v):
        return x0 + (v - lo) / span * (x1 - x0)

    for x in xs:
        c.parts.append(f'<text x="{px(x):.2f}" y="{y1 + 16}" text-anchor="middle" '
                       f'font-size="10">{x:g}</text>')
    for si, (name, ys) in enumerate(series.items()):
        colour = COLOURS[si % len(COLOURS)]
        pts = " ".join(f"{px(x):.2f},{c.py(float(y)):.2f}" for x, y in zip(xs, ys))
        c.parts.append(f'<polyline points="{pts}" fill="none" stroke="{colour}" '
                       f'data-series="{escape(name)}"/>')
        for x, y in zip(xs, ys):
            c.parts.append(f'<circle cx="{px(x):.2f}" cy="{c.py(float(y)):.2f}" r="3" fill="{colour}" '
                           f'data-series="{escape(name)}" data-x="{x!r}" data-value="{float(y)!r}"/>')
    _legend(c, list(series))
    return c.render()


def _legend(c: _Canvas, names):
    _, y0, x1, _ = c.box
    for i, name in enumerate(names):
        y = y0 + 6 + 14 * i
        c.parts.append(f'<rect x="{x1 - 110}" y="{y - 8}" width="10" height="10" '
                       f'fill="{COLOURS[i % len(COLOURS)]}"/>')
        c.parts.append(f'<text x="{x1 - 96}" y="{y + 1}" font-size="11">{escape(name)}</text>')
