"""Deterministic SVG line charts for training curves."""
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")

WIDTH, HEIGHT = 640, 300
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 60, 150, 30, 40


def _fmt(v):
    return f"{v:.2f}"


def _range(values, lo=None, hi=None):
    if lo is None or hi is None:
        vmin, vmax = min(values), max(values)
        if vmax == vmin:
            vmin, vmax = vmin - 0.5, vmax + 0.5
        lo = vmin if lo is None else lo
        hi = vmax if hi is None else hi
    return lo, hi


class Chart:
    """Maps data coordinates into one plotting rectangle (SVG y grows downwards)."""

    def __init__(self, x_range, y_range, top=0):
        self.x0, self.x1 = x_range
        self.y0, self.y1 = y_range
        self.top = top

    def px(self, x):
        span = (self.x1 - self.x0) or 1.0
        return MARGIN_L + (x - self.x0) / span * (WIDTH - MARGIN_L - MARGIN_R)

    def py(self, y):
        span = (self.y1 - self.y0) or 1.0
        return self.top + MARGIN_T + (1.0 - (y - self.y0) / span) * (HEIGHT - MARGIN_T - MARGIN_B)


def _panel(rows, series, x, title, y_label, y_range, top):
    pts_by_series = []
    for label, column in series:
        pts = [(float(r[x]), float(r[column])) for r in rows if r.get(column) not in (None, "")]
        pts_by_series.append((label, pts))
    xs = [p[0] for _, pts in pts_by_series for p in pts] or [0.0, 1.0]
    ys = [p[1] for _, pts in pts_by_series for p in pts] or [0.0, 1.0]
    lo, hi = y_range if y_range else (None, None)
    chart = Chart(_range(xs), _range(ys, lo, hi), top)
    out = []
    left, right = MARGIN_L, WIDTH - MARGIN_R
    y_top, y_bot = top + MARGIN_T, top + HEIGHT - MARGIN_B
    out.append(f'<rect x="{left}" y="{y_top}" width="{right - left}" height="{y_bot - y_top}" '
               f'fill="none" stroke="#333"/>')
    for i in range(5):
        yv = chart.y0 + (chart.y1 - chart.y0) * i / 4
        yy = _fmt(chart.py(yv))
        out.append(f'<line x1="{left}" y1="{yy}" x2="{right}" y2="{yy}" stroke="#ddd"/>')
        out.append(f'<text x="{left - 6}" y="{yy}" text-anchor="end" font-size="10">{yv:.3g}</text>')
        xv = chart.x0 + (chart.x1 - chart.x0) * i / 4
        xx = _fmt(chart.px(xv))
        out.append(f'<text x="{xx}" y="{y_bot + 14}" text-anchor="middle" font-size="10">{xv:.3g}</text>')
    out.append(f'<text x="{(left + right) / 2}" y="{y_bot + 32}" text-anchor="middle" font-size="11">'
               f'{escape(x)}</text>')
    out.append(f'<text x="14" y="{(y_top + y_bot) / 2}" font-size="11" text-anchor="middle" '
               f'transform="rotate(-90 14 {(y_top + y_bot) / 2})">{escape(y_label)}</text>')
    if title:
        out.append(f'<text x="{left}" y="{y_top - 10}" font-size="12" font-weight="bold">{escape(title)}</text>')
    for i, (label, pts) in enumerate(pts_by_series):
        color = PALETTE[i % len(PALETTE)]
        if len(pts) == 1:
            px, py = pts[0]
            out.append(f'<circle cx="{_fmt(chart.px(px))}" cy="{_fmt(chart.py(py))}" r="3" fill="{color}"/>')
        elif pts:
            coords = " ".join(f"{_fmt(chart.px(a))},{_fmt(chart.py(b))}" for a, b in pts)
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        ly = y_top + 12 + 16 * i
        out.append(f'<line x1="{right + 10}" y1="{ly}" x2="{right + 30}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{right + 34}" y="{ly + 4}" font-size="10">{escape(label)}</text>')
    return out


def render_figure(panels):
    """Stack several panels vertically into one SVG document.

    Each panel is a dict with ``rows``, ``series`` (list of (label, column)),
    and optional ``x``, ``title``, ``y_label``, ``y_range``.
    """
    body = []
    for i, p in enumerate(panels):
        body += _panel(p["rows"], p["series"], p.get("x", "epoch"), p.get("title", ""),
                       p.get("y_label", ""), p.get("y_range"), i * HEIGHT)
    total_h = HEIGHT * max(len(panels), 1)
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{total_h}" '
            f'viewBox="0 0 {WIDTH} {total_h}">')
    return "\n".join([head, f'<rect width="{WIDTH}" height="{total_h}" fill="white"/>'] + body + ["</svg>"]) + "\n"


def render_curves(rows, series, x="epoch", title="", y_label="", y_range=None):
    """One chart with a polyline per (label, column) series."""
    return render_figure([{"rows": rows, "series": series, "x": x, "title": title,
                           "y_label": y_label, "y_range": y_range}])
