"""CSV / SVG / JSON emitters. Floats are written with repr so files are byte-stable."""

from __future__ import annotations

import csv
import json
import math
import os
from html import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2",
           "#7f7f7f", "#bcbd22", "#17becf")


class OutputError(OSError):
    pass


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _open(path, mode="w"):
    try:
        d = os.path.dirname(os.fspath(path))
        if d:
            os.makedirs(d, exist_ok=True)
        return open(path, mode, newline="" if "b" not in mode else None)
    except OSError as e:
        raise OutputError(f"cannot write {path}: {e.strerror}") from e


def write_csv(header, rows, path) -> None:
    """Header row plus data rows; ``rows`` may be empty."""
    with _open(path) as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def read_csv(path) -> tuple[list, list]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def write_record(record: dict, path) -> None:
    with _open(path) as fh:
        fh.write(canonical_json(record))
        fh.write("\n")


def read_record(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def write_svg(curves: dict, path, title: str = "", ylabel: str = "", xlabel: str = "t",
              width: int = 720, height: int = 440) -> None:
    """Line chart with a log10 vertical axis; one polyline per curve.

    ``curves`` maps label -> (xs, ys). Nonpositive or non-finite y values are
    dropped from the polyline.
    """
    ml, mr, mt, mb = 70, 170, 36, 48
    pw, ph = width - ml - mr, height - mt - mb
    pts = {}
    for label, (xs, ys) in curves.items():
        pts[label] = [(float(x), math.log10(y)) for x, y in zip(xs, ys)
                      if y is not None and math.isfinite(y) and y > 0]
    allp = [p for v in pts.values() for p in v]
    if allp:
        x0, x1 = min(p[0] for p in allp), max(p[0] for p in allp)
        y0, y1 = math.floor(min(p[1] for p in allp)), math.ceil(max(p[1] for p in allp))
    else:
        x0, x1, y0, y1 = 0.0, 1.0, 0, 1
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y1 = y0 + 1

    def sx(x):
        return ml + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return mt + (y1 - y) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{ml + pw / 2:.1f}" y="20" text-anchor="middle" font-size="13">{escape(title)}</text>',
           f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>']
    step = max(1, (y1 - y0) // 8)
    for e in range(y0, y1 + 1, step):
        y = sy(e)
        out.append(f'<line x1="{ml}" y1="{y:.1f}" x2="{ml + pw}" y2="{y:.1f}" stroke="#ddd"/>')
        out.append(f'<text x="{ml - 6}" y="{y + 4:.1f}" text-anchor="end">1e{e}</text>')
    for k in range(6):
        xv = x0 + k * (x1 - x0) / 5
        out.append(f'<text x="{sx(xv):.1f}" y="{mt + ph + 16}" text-anchor="middle">{xv:g}</text>')
    out.append(f'<text x="{ml + pw / 2:.1f}" y="{height - 8}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{mt + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {mt + ph / 2:.1f})">{escape(ylabel)}</text>')
    for k, (label, p) in enumerate(pts.items()):
        color = PALETTE[k % len(PALETTE)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in p)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        ly = mt + 14 + 16 * k
        out.append(f'<line x1="{ml + pw + 12}" y1="{ly - 4}" x2="{ml + pw + 32}" y2="{ly - 4}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{ml + pw + 38}" y="{ly}">{escape(str(label))}</text>')
    out.append("</svg>")
    with _open(path) as fh:
        fh.write("\n".join(out) + "\n")
