"""Minimal native SVG figures: scatter/line plots and grid contours.

Deliberately dependency-free; output is deterministic (no timestamps, all
floats formatted with repr-stable rounding), so figures can be byte
compared across reruns.
"""

import numpy as np

_PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
            "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")

WIDTH, HEIGHT = 640, 480
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 70, 20, 30, 50


def _fmt(x):
    return f"{x:.3f}".rstrip("0").rstrip(".")


class SvgFigure:
    """One axes box with data-coordinate helpers."""

    def __init__(self, xlim, ylim, xlabel="", ylabel="", title=""):
        self.xlim = xlim
        self.ylim = ylim
        self.parts = []
        self._decorate(xlabel, ylabel, title)

    def _x(self, x):
        lo, hi = self.xlim
        f = (x - lo) / (hi - lo) if hi > lo else 0.5
        return MARGIN_L + f * (WIDTH - MARGIN_L - MARGIN_R)

    def _y(self, y):
        lo, hi = self.ylim
        f = (y - lo) / (hi - lo) if hi > lo else 0.5
        return HEIGHT - MARGIN_B - f * (HEIGHT - MARGIN_T - MARGIN_B)

    def _decorate(self, xlabel, ylabel, title):
        self.parts.append(
            f'<rect x="{MARGIN_L}" y="{MARGIN_T}" '
            f'width="{WIDTH - MARGIN_L - MARGIN_R}" '
            f'height="{HEIGHT - MARGIN_T - MARGIN_B}" '
            'fill="none" stroke="#333" stroke-width="1"/>'
        )
        if title:
            self.parts.append(
                f'<text x="{WIDTH / 2}" y="{MARGIN_T - 10}" text-anchor="middle" '
                f'font-size="14" font-family="sans-serif">{title}</text>'
            )
        if xlabel:
            self.parts.append(
                f'<text x="{WIDTH / 2}" y="{HEIGHT - 10}" text-anchor="middle" '
                f'font-size="12" font-family="sans-serif">{xlabel}</text>'
            )
        if ylabel:
            x, y = 18, HEIGHT / 2
            self.parts.append(
                f'<text x="{x}" y="{y}" text-anchor="middle" font-size="12" '
                f'font-family="sans-serif" transform="rotate(-90 {x} {y})">{ylabel}</text>'
            )
        for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
            xv = self.xlim[0] + frac * (self.xlim[1] - self.xlim[0])
            yv = self.ylim[0] + frac * (self.ylim[1] - self.ylim[0])
            self.parts.append(
                f'<text x="{_fmt(self._x(xv))}" y="{HEIGHT - MARGIN_B + 16}" '
                f'text-anchor="middle" font-size="10" font-family="sans-serif">'
                f'{_fmt(xv)}</text>'
            )
            self.parts.append(
                f'<text x="{MARGIN_L - 6}" y="{_fmt(self._y(yv) + 3)}" '
                f'text-anchor="end" font-size="10" font-family="sans-serif">'
                f'{_fmt(yv)}</text>'
            )

    def polyline(self, xs, ys, color="#1f77b4", width=1.5, dash=None):
        pts = " ".join(f"{_fmt(self._x(x))},{_fmt(self._y(y))}"
                       for x, y in zip(xs, ys))
        dash_attr = f' stroke-dasharray="{dash}"' if dash else ""
        self.parts.append(
            f'<polyline points="{pts}" fill="none" stroke="{color}" '
            f'stroke-width="{width}"{dash_attr}/>'
        )

    def band(self, xs, lo, hi, color="#1f77b4", opacity=0.25):
        fwd = [f"{_fmt(self._x(x))},{_fmt(self._y(y))}" for x, y in zip(xs, hi)]
        back = [f"{_fmt(self._x(x))},{_fmt(self._y(y))}"
                for x, y in zip(reversed(list(xs)), reversed(list(lo)))]
        self.parts.append(
            f'<polygon points="{" ".join(fwd + back)}" fill="{color}" '
            f'fill-opacity="{opacity}" stroke="none"/>'
        )

    def scatter(self, xs, ys, color="#1f77b4", r=2.5):
        for x, y in zip(xs, ys):
            self.parts.append(
                f'<circle cx="{_fmt(self._x(x))}" cy="{_fmt(self._y(y))}" '
                f'r="{r}" fill="{color}"/>'
            )

    def rect_data(self, x0, x1, y0, y1, color):
        xa, xb = self._x(x0), self._x(x1)
        ya, yb = self._y(y1), self._y(y0)
        self.parts.append(
            f'<rect x="{_fmt(min(xa, xb))}" y="{_fmt(min(ya, yb))}" '
            f'width="{_fmt(abs(xb - xa) + 0.5)}" height="{_fmt(abs(yb - ya) + 0.5)}" '
            f'fill="{color}" stroke="none"/>'
        )

    def label(self, x, y, text, color="#333", size=10):
        self.parts.append(
            f'<text x="{_fmt(self._x(x))}" y="{_fmt(self._y(y))}" font-size="{size}" '
            f'font-family="sans-serif" fill="{color}">{text}</text>'
        )

    def save(self, path):
        body = "\n".join(self.parts)
        doc = (
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" '
            f'height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">\n'
            f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>\n'
            f"{body}\n</svg>\n"
        )
        with open(path, "w") as fh:
            fh.write(doc)


def color_for(index):
    return _PALETTE[index % len(_PALETTE)]


def _viridis_like(f):
    """Cheap perceptual-ish ramp from dark blue to yellow, f in [0, 1]."""
    f = min(1.0, max(0.0, f))
    r = int(255 * min(1.0, max(0.0, 1.8 * f - 0.6)))
    g = int(255 * min(1.0, max(0.0, 1.3 * f)))
    b = int(255 * min(1.0, max(0.0, 0.9 - 0.8 * f)))
    return f"#{r:02x}{g:02x}{b:02x}"


def _marching_squares(values, level, ax1, ax2):
    """Iso-level segments on a regular grid; returns [(x0,y0,x1,y1), ...]."""
    segs = []
    n1, n2 = values.shape

    def interp(va, vb, pa, pb):
        if vb == va:
            return 0.5 * (pa + pb)
        t = (level - va) / (vb - va)
        return pa + t * (pb - pa)

    for i in range(n1 - 1):
        for j in range(n2 - 1):
            v = (values[i, j], values[i + 1, j], values[i + 1, j + 1], values[i, j + 1])
            x = (ax1[i], ax1[i + 1], ax1[i + 1], ax1[i])
            y = (ax2[j], ax2[j], ax2[j + 1], ax2[j + 1])
            idx = sum(1 << k for k in range(4) if v[k] > level)
            if idx in (0, 15):
                continue
            pts = []
            edges = ((0, 1), (1, 2), (2, 3), (3, 0))
            for a, b in edges:
                if (v[a] > level) != (v[b] > level):
                    pts.append((interp(v[a], v[b], x[a], x[b]),
                                interp(v[a], v[b], y[a], y[b])))
            for k in range(0, len(pts) - 1, 2):
                segs.append((pts[k][0], pts[k][1], pts[k + 1][0], pts[k + 1][1]))
    return segs


def contour(values, ax1, ax2, path, xlabel="", ylabel="", title="",
            n_levels=8, annotations=()):
    """Filled contour: colored cells plus marching-squares iso-lines.

    ``values`` has shape (len(ax1), len(ax2)); annotations are
    (x, y, text) triples drawn as white markers.
    """
    values = np.asarray(values, dtype=np.float64)
    fig = SvgFigure((float(ax1[0]), float(ax1[-1])), (float(ax2[0]), float(ax2[-1])),
                    xlabel=xlabel, ylabel=ylabel, title=title)
    vmin, vmax = float(values.min()), float(values.max())
    span = (vmax - vmin) or 1.0
    for i in range(len(ax1)):
        x0 = ax1[max(i - 1, 0)] * 0.5 + ax1[i] * 0.5
        x1 = ax1[min(i + 1, len(ax1) - 1)] * 0.5 + ax1[i] * 0.5
        for j in range(len(ax2)):
            y0 = ax2[max(j - 1, 0)] * 0.5 + ax2[j] * 0.5
            y1 = ax2[min(j + 1, len(ax2) - 1)] * 0.5 + ax2[j] * 0.5
            fig.rect_data(x0, x1, y0, y1,
                          _viridis_like((values[i, j] - vmin) / span))
    for li in range(1, n_levels):
        level = vmin + span * li / n_levels
        for x0, y0, x1, y1 in _marching_squares(values, level, ax1, ax2):
            fig.parts.append(
                f'<line x1="{_fmt(fig._x(x0))}" y1="{_fmt(fig._y(y0))}" '
                f'x2="{_fmt(fig._x(x1))}" y2="{_fmt(fig._y(y1))}" '
                'stroke="#ffffff" stroke-width="0.6" stroke-opacity="0.7"/>'
            )
    for x, y, text in annotations:
        fig.parts.append(
            f'<circle cx="{_fmt(fig._x(x))}" cy="{_fmt(fig._y(y))}" r="3" '
            'fill="white" stroke="#333"/>'
        )
        fig.label(x, y, f" {text}", color="#fff")
    fig.parts.append(
        f'<text x="{WIDTH - MARGIN_R}" y="{MARGIN_T - 10}" text-anchor="end" '
        f'font-size="10" font-family="sans-serif">range {_fmt(vmin)} to {_fmt(vmax)}</text>'
    )
    fig.save(path)
