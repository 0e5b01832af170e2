"""Log-loss histogram with optional mixture overlay, as SVG plus a CSV
companion that holds every plotted number."""

from __future__ import annotations

import io

import numpy as np

from .datafile import atomic_write_text
from .lossmodel import GmmParams, LossTable

_W, _H, _PAD = 640, 360, 40


def histogram(values, bins: int = 100):
    counts, edges = np.histogram(np.asarray(values, dtype=np.float64), bins=bins)
    return counts, edges


def overlay_curves(gmm: GmmParams, xs) -> tuple[np.ndarray, np.ndarray]:
    """pi_k-scaled component densities at ``xs`` (fitted space)."""
    return gmm.density(xs, 0), gmm.density(xs, 1)


def _overlay_grid(gmm: GmmParams, edges: np.ndarray) -> np.ndarray:
    # bin centres plus both means, so the peaks are sampled exactly
    centres = 0.5 * (edges[:-1] + edges[1:])
    return np.unique(np.concatenate([centres, [gmm.mu0, gmm.mu1]]))


def plot_values(table: LossTable, gmm: GmmParams | None):
    if gmm is not None and gmm.space == "normalized_loss":
        return gmm.transform(table.raw_loss)
    return table.log_loss


def render_csv(counts, edges, gmm: GmmParams | None) -> str:
    buf = io.StringIO()
    buf.write("kind,x_left,x_right,count,density0,density1\n")
    for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
        buf.write(f"bin,{lo:.17g},{hi:.17g},{int(c)},,\n")
    if gmm is not None:
        xs = _overlay_grid(gmm, edges)
        d0, d1 = overlay_curves(gmm, xs)
        for x, a, b in zip(xs, d0, d1):
            buf.write(f"curve,{x:.17g},{x:.17g},,{a:.17g},{b:.17g}\n")
    return buf.getvalue()


def render_svg(counts, edges, gmm: GmmParams | None, title: str = "log-loss distribution") -> str:
    total = counts.sum()
    width = edges[1] - edges[0] if len(edges) > 1 else 1.0
    # histogram drawn as a density so it shares an axis with the overlay
    dens = counts / (total * width) if total else counts.astype(float)
    ymax = float(dens.max()) if len(dens) else 1.0
    if gmm is not None:
        xs = _overlay_grid(gmm, edges)
        d0, d1 = overlay_curves(gmm, xs)
        ymax = max(ymax, float(d0.max()), float(d1.max()))
    ymax = ymax or 1.0
    x0, x1 = float(edges[0]), float(edges[-1])
    span = (x1 - x0) or 1.0

    def sx(x):
        return _PAD + (x - x0) / span * (_W - 2 * _PAD)

    def sy(y):
        return _H - _PAD - y / ymax * (_H - 2 * _PAD)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" viewBox="0 0 {_W} {_H}">',
        f'<title>{title}</title>',
        f'<rect x="0" y="0" width="{_W}" height="{_H}" fill="white"/>',
        f'<line x1="{_PAD}" y1="{_H - _PAD}" x2="{_W - _PAD}" y2="{_H - _PAD}" stroke="black"/>',
        f'<line x1="{_PAD}" y1="{_PAD}" x2="{_PAD}" y2="{_H - _PAD}" stroke="black"/>',
        '<g class="histogram" fill="#8fa8c8">',
    ]
    for d, lo, hi in zip(dens, edges[:-1], edges[1:]):
        if d > 0:
            out.append(f'<rect x="{sx(lo):.2f}" y="{sy(d):.2f}" width="{sx(hi) - sx(lo):.2f}" height="{sy(0) - sy(d):.2f}"/>')
    out.append("</g>")
    if gmm is not None:
        for cls, ys, colour in (("component0", d0, "#2a7f3f"), ("component1", d1, "#c0392b")):
            pts = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, ys))
            out.append(f'<path class="{cls}" d="M {pts}" fill="none" stroke="{colour}" stroke-width="2"/>')
    out.append(f'<text x="{_PAD}" y="{_H - 10}" font-size="12">{x0:.2f}</text>')
    out.append(f'<text x="{_W - _PAD}" y="{_H - 10}" font-size="12" text-anchor="end">{x1:.2f}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot_losses(loss_path, gmm_path, out_path, bins: int = 100) -> tuple[str, str]:
    """Write ``out_path`` (SVG) and ``out_path`` with a .csv suffix."""
    try:
        with open(loss_path) as fh:
            table = LossTable.from_csv(fh.read())
    except (OSError, ValueError, KeyError) as exc:
        raise ValueError(f"cannot read loss dump {loss_path}: {exc}") from None
    gmm = GmmParams.load(gmm_path) if gmm_path else None
    counts, edges = histogram(plot_values(table, gmm), bins)
    svg_path = str(out_path)
    csv_path = svg_path[:-4] + ".csv" if svg_path.endswith(".svg") else svg_path + ".csv"
    atomic_write_text(svg_path, render_svg(counts, edges, gmm))
    atomic_write_text(csv_path, render_csv(counts, edges, gmm))
    return svg_path, csv_path
