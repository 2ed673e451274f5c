"""Deterministic writers for band data, reports and band diagrams.

Data files never carry timestamps; :func:`write_sidecar` puts run metadata
next to them instead.
"""

from __future__ import annotations

import json
import math
import time
from pathlib import Path

import numpy as np

from .spectral import BandStructure

BANDS_HEADER = "segment,arclength,k1,k2,band,lambda,residual"


def fmt(x) -> str:
    """17 significant digits, locale independent."""
    return format(float(x), ".17g")


def _rows_bandstructure(bs: BandStructure, prefix=()):
    pre = "".join(fmt(v) + "," for v in prefix)
    for i, k in enumerate(bs.k_points):
        head = f"{pre}{int(bs.segment[i])},{fmt(bs.arclength[i])},{fmt(k[0])},{fmt(k[1])}"
        for j in range(bs.n_bands):
            yield f"{head},{j + 1},{fmt(bs.bands[i, j])},{fmt(bs.residuals[i, j])}"


def write_bands_csv(bs: BandStructure, path) -> Path:
    path = Path(path)
    lines = [BANDS_HEADER, *_rows_bandstructure(bs)]
    path.write_text("\n".join(lines) + "\n", encoding="ascii")
    return path


def read_bands_csv(path) -> dict:
    """Parse a band CSV back into arrays (used for round-trip checks)."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    n_bands = int(data[:, 4].max())
    return {
        "segment": data[::n_bands, 0].astype(int),
        "arclength": data[::n_bands, 1],
        "k_points": data[::n_bands, 2:4],
        "bands": data[:, 5].reshape(-1, n_bands),
        "residuals": data[:, 6].reshape(-1, n_bands),
    }


def write_sweep_csv(results: dict, path) -> Path:
    path = Path(path)
    lines = ["t," + BANDS_HEADER]
    for t in sorted(results):
        lines.extend(_rows_bandstructure(results[t], prefix=(t,)))
    path.write_text("\n".join(lines) + "\n", encoding="ascii")
    return path


def write_probe_csv(probe, path) -> Path:
    path = Path(path)
    lines = ["t,lambda,gap"]
    lines += [f"{fmt(t)},{fmt(l)},{fmt(g)}" for t, l, g in zip(probe.t, probe.lam, probe.gap)]
    path.write_text("\n".join(lines) + "\n", encoding="ascii")
    return path


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def write_json(obj, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n", encoding="ascii")
    return path


def write_sidecar(path, command: str, started: float, extra: dict | None = None) -> Path:
    meta = {
        "command": command,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S%z", time.localtime(started)),
        "elapsed_seconds": time.time() - started,
    }
    meta.update(extra or {})
    return write_json(meta, path)


# -- SVG band diagrams -------------------------------------------------------

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf",
            "#7f7f7f")


def _nice_ticks(lo, hi, n=6):
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((s * mag for s in (1, 2, 5, 10) if s * mag >= raw), default=10 * mag)
    start = math.ceil(lo / step) * step
    return [start + i * step for i in range(int((hi - start) / step + 1e-9) + 1)]


def band_svg(curves, ticks, title: str = "", ylabel: str = "lambda",
             width: int = 720, height: int = 480) -> str:
    """Render band curves as SVG polylines.

    Parameters
    ----------
    curves : list of (x, y, style_index)
        Each curve is drawn as one polyline; ``style_index`` picks the colour.
    ticks : list of (x, label)
        Vertical guide lines with labels under the axis.
    """
    ml, mr, mt, mb = 64, 16, 32, 40
    xs = np.concatenate([np.asarray(c[0], float) for c in curves])
    ys = np.concatenate([np.asarray(c[1], float) for c in curves])
    x0, x1 = float(xs.min()), float(xs.max())
    if x1 == x0:
        x1 = x0 + 1.0
    y0, y1 = float(ys.min()), float(ys.max())
    pad = 0.05 * (y1 - y0 if y1 > y0 else 1.0)
    y0, y1 = y0 - pad, y1 + pad

    def X(v):
        return ml + (v - x0) / (x1 - x0) * (width - ml - mr)

    def Y(v):
        return height - mb - (v - y0) / (y1 - y0) * (height - mt - mb)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<rect x="{ml}" y="{mt}" width="{width - ml - mr}" height="{height - mt - mb}" '
        'fill="none" stroke="black"/>',
    ]
    if title:
        out.append(f'<text x="{width / 2:.2f}" y="20" text-anchor="middle">{_esc(title)}</text>')
    for v in _nice_ticks(y0, y1):
        out.append(f'<line x1="{ml - 4}" y1="{Y(v):.2f}" x2="{ml}" y2="{Y(v):.2f}" stroke="black"/>')
        out.append(f'<text x="{ml - 6}" y="{Y(v) + 4:.2f}" text-anchor="end">{v:g}</text>')
    out.append(f'<text x="14" y="{(height - mb + mt) / 2:.2f}" text-anchor="middle" '
               f'transform="rotate(-90 14 {(height - mb + mt) / 2:.2f})">{_esc(ylabel)}</text>')
    for x, label in ticks:
        out.append(f'<line x1="{X(x):.2f}" y1="{mt}" x2="{X(x):.2f}" y2="{height - mb}" '
                   'stroke="#bbbbbb" stroke-dasharray="3,3"/>')
        out.append(f'<text x="{X(x):.2f}" y="{height - mb + 16}" text-anchor="middle">'
                   f'{_esc(label)}</text>')
    for x, y, style in curves:
        pts = " ".join(f"{X(a):.2f},{Y(b):.2f}" for a, b in zip(x, y))
        out.append(f'<polyline fill="none" stroke="{_PALETTE[style % len(_PALETTE)]}" '
                   f'stroke-width="1.5" points="{pts}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _path_curves(bs: BandStructure, style_offset=0):
    curves = []
    for j in range(bs.n_bands):
        curves.append((bs.arclength, bs.bands[:, j], j + style_offset))
    return curves


def _path_ticks(bs: BandStructure):
    return [(float(bs.arclength[i]), str(lab)) for i, lab in bs.labels]


def write_band_svg(bs: BandStructure, path, title: str = "") -> Path:
    """Band diagram over arclength; gridded data is drawn one k-row per panel strip."""
    path = Path(path)
    if bs.grid_shape is None:
        svg = band_svg(_path_curves(bs), _path_ticks(bs), title)
    else:
        n1, n2 = bs.grid_shape
        curves, ticks = [], []
        for i1 in range(n1):
            rows = slice(i1 * n2, (i1 + 1) * n2)
            x = i1 + np.arange(n2) / n2
            for j in range(bs.n_bands):
                curves.append((x, bs.bands[rows, j], j))
            ticks.append((float(i1), f"{i1}"))
        svg = band_svg(curves, ticks, title)
    path.write_text(svg, encoding="ascii")
    return path


def write_sweep_svg(results: dict, path, title: str = "") -> Path:
    path = Path(path)
    curves, ticks = [], []
    for n, t in enumerate(sorted(results)):
        curves.extend(_path_curves(results[t], style_offset=n))
        ticks = _path_ticks(results[t])
    path.write_text(band_svg(curves, ticks, title), encoding="ascii")
    return path
