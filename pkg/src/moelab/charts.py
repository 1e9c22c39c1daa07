"""Hand-rolled deterministic SVG: log-log mean-loss charts with error bars.

No plotting library is used so that identical inputs produce identical
bytes: every coordinate is formatted with a fixed precision and elements
are emitted in a fixed order. Each series draws mean markers joined by a
polyline, +/-2 standard-deviation error bars, and a dashed fitted line
labelled with its exponent.
"""

from __future__ import annotations

import math

from .errors import ContractError
from .experiments import RateFit

WIDTH, HEIGHT = 640, 480
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 70, 30, 46, 56
PALETTE = {
    "PerturbedCosine": "#1f77b4",
    "Cosine": "#2ca02c",
    "Linear": "#9467bd",
}
FALLBACK_COLORS = ("#d62728", "#ff7f0e", "#8c564b")


def _fmt(v: float) -> str:
    return f"{v:.2f}"


class _LogAxes:
    def __init__(self, xs, ys):
        self.x0, self.x1 = math.log10(min(xs)), math.log10(max(xs))
        y0, y1 = math.log10(min(ys)), math.log10(max(ys))
        if self.x1 == self.x0:
            self.x1 = self.x0 + 1.0
        if y1 == y0:
            y0, y1 = y0 - 0.5, y1 + 0.5
        pad = 0.06 * (y1 - y0)
        self.y0, self.y1 = y0 - pad, y1 + pad

    def x(self, n: float) -> float:
        t = (math.log10(n) - self.x0) / (self.x1 - self.x0)
        return MARGIN_L + t * (WIDTH - MARGIN_L - MARGIN_R)

    def y(self, v: float) -> float:
        t = (math.log10(v) - self.y0) / (self.y1 - self.y0)
        return HEIGHT - MARGIN_B - t * (HEIGHT - MARGIN_T - MARGIN_B)


def _decade_ticks(lo: float, hi: float):
    return [e for e in range(math.floor(lo), math.ceil(hi) + 1) if lo - 1e-9 <= e <= hi + 1e-9]


def render_plot(
    series: list[tuple[str, list[tuple[int, float, float]]]],
    fits: dict[str, RateFit],
    path: str,
    title: str = "",
) -> None:
    """Write one log-log SVG chart.

    ``series`` holds (label, [(n, mean, std)]) entries; each label keys its
    fitted line in ``fits``. Series whose means are all zero cannot be
    drawn on a log axis and are skipped with a visible annotation.
    """
    drawn = []
    skipped = []
    for label, points in series:
        pos = [(n, m, s) for n, m, s in points if m > 0.0]
        if len(pos) >= 2:
            drawn.append((label, pos))
        else:
            skipped.append(label)
    if not drawn:
        raise ContractError("no drawable series: all means are zero or singletons")

    xs = [n for _, pts in drawn for n, _, _ in pts]
    ys = []
    for _, pts in drawn:
        for n, m, s in pts:
            ys.append(m)
            ys.append(max(m - 2.0 * s, m * 1e-3))
            ys.append(m + 2.0 * s)
    ax = _LogAxes(xs, ys)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="Helvetica,Arial,sans-serif">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
    ]
    if title:
        parts.append(
            f'<text x="{WIDTH / 2:.0f}" y="24" text-anchor="middle" font-size="15">{title}</text>'
        )

    # frame and decade grid
    x_axis_y = HEIGHT - MARGIN_B
    parts.append(
        f'<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{WIDTH - MARGIN_L - MARGIN_R}" '
        f'height="{HEIGHT - MARGIN_T - MARGIN_B}" fill="none" stroke="#333" stroke-width="1"/>'
    )
    for e in _decade_ticks(ax.x0, ax.x1):
        px = ax.x(10.0**e)
        parts.append(
            f'<line x1="{_fmt(px)}" y1="{MARGIN_T}" x2="{_fmt(px)}" y2="{x_axis_y}" '
            f'stroke="#ddd" stroke-width="0.5"/>'
        )
        parts.append(
            f'<text x="{_fmt(px)}" y="{x_axis_y + 18}" text-anchor="middle" font-size="12">'
            f"1e{e}</text>"
        )
    for e in _decade_ticks(ax.y0, ax.y1):
        py = ax.y(10.0**e)
        parts.append(
            f'<line x1="{MARGIN_L}" y1="{_fmt(py)}" x2="{WIDTH - MARGIN_R}" y2="{_fmt(py)}" '
            f'stroke="#ddd" stroke-width="0.5"/>'
        )
        parts.append(
            f'<text x="{MARGIN_L - 8}" y="{_fmt(py + 4)}" text-anchor="end" font-size="12">'
            f"1e{e}</text>"
        )
    parts.append(
        f'<text x="{(MARGIN_L + WIDTH - MARGIN_R) / 2:.0f}" y="{HEIGHT - 14}" '
        f'text-anchor="middle" font-size="13">sample size n</text>'
    )
    parts.append(
        f'<text x="18" y="{(MARGIN_T + HEIGHT - MARGIN_B) / 2:.0f}" text-anchor="middle" '
        f'font-size="13" transform="rotate(-90 18 {(MARGIN_T + HEIGHT - MARGIN_B) / 2:.0f})">'
        f"mean Voronoi loss</text>"
    )

    fallback = iter(FALLBACK_COLORS)
    legend_y = MARGIN_T + 16
    for label, pts in drawn:
        color = PALETTE.get(label) or next(fallback)
        # error bars first so markers sit on top
        for n, m, s in pts:
            lo = max(m - 2.0 * s, m * 1e-3)
            hi = m + 2.0 * s
            px = ax.x(n)
            parts.append(
                f'<line x1="{_fmt(px)}" y1="{_fmt(ax.y(lo))}" x2="{_fmt(px)}" '
                f'y2="{_fmt(ax.y(hi))}" stroke="{color}" stroke-width="1" class="errbar"/>'
            )
            for v in (lo, hi):
                parts.append(
                    f'<line x1="{_fmt(px - 4)}" y1="{_fmt(ax.y(v))}" x2="{_fmt(px + 4)}" '
                    f'y2="{_fmt(ax.y(v))}" stroke="{color}" stroke-width="1"/>'
                )
        coords = " ".join(f"{_fmt(ax.x(n))},{_fmt(ax.y(m))}" for n, m, _ in pts)
        parts.append(
            f'<polyline points="{coords}" fill="none" stroke="{color}" '
            f'stroke-width="1.5" class="series"/>'
        )
        for n, m, _ in pts:
            parts.append(
                f'<circle cx="{_fmt(ax.x(n))}" cy="{_fmt(ax.y(m))}" r="3" fill="{color}"/>'
            )
        fit = fits.get(label)
        if fit is not None:
            n_lo, n_hi = pts[0][0], pts[-1][0]
            y_lo = math.exp(fit.intercept + fit.slope * math.log(n_lo))
            y_hi = math.exp(fit.intercept + fit.slope * math.log(n_hi))
            parts.append(
                f'<polyline points="{_fmt(ax.x(n_lo))},{_fmt(ax.y(y_lo))} '
                f'{_fmt(ax.x(n_hi))},{_fmt(ax.y(y_hi))}" fill="none" stroke="{color}" '
                f'stroke-width="1.2" stroke-dasharray="6,4" class="fit"/>'
            )
            tag = f"O(n^{fit.slope:.2f})"
        else:
            tag = ""
        parts.append(
            f'<rect x="{WIDTH - MARGIN_R - 196}" y="{legend_y - 10}" width="12" height="3" '
            f'fill="{color}"/>'
        )
        parts.append(
            f'<text x="{WIDTH - MARGIN_R - 178}" y="{legend_y - 4}" font-size="12">'
            f"{label} {tag}</text>"
        )
        legend_y += 18

    for label in skipped:
        parts.append(
            f'<text x="{MARGIN_L + 10}" y="{legend_y - 4}" font-size="12" fill="#b00" '
            f'class="skipped">series {label} skipped: no positive means</text>'
        )
        legend_y += 18

    parts.append("</svg>")
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(parts) + "\n")
    import os

    os.replace(tmp, path)
