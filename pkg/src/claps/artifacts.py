"""Atomic file output, content hashes, CSV tables and SVG trajectory plots."""

from __future__ import annotations

import csv
import hashlib
import io
import os
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


def atomic_write_bytes(path: Path, data: bytes) -> None:
    """Write to a temporary file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    """CSV with minimal quoting (vertex names such as ``(0,0)`` contain commas)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_cell(v) for v in r])
    return buf.getvalue()


def _cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


class CsvLog:
    """Append-only CSV log that rewrites itself atomically on every row."""

    def __init__(self, path: Path | None, header: Sequence[str]):
        self.path = None if path is None else Path(path)
        self.header = list(header)
        self.rows: list[list] = []

    def add(self, *row):
        self.rows.append(list(row))
        if self.path is not None:
            atomic_write_text(self.path, csv_text(self.header, self.rows))


def svg_trajectories(space_lo, space_hi, rects: list[tuple[tuple, tuple, str]],
                     paths: list[np.ndarray], size: int = 480, colors=None) -> str:
    """Draw axis-aligned rectangles ``(lo, hi, fill)`` and polylines over a 2D box."""
    x0, y0 = float(space_lo[0]), float(space_lo[1])
    w, h = float(space_hi[0]) - x0, float(space_hi[1]) - y0
    sx = size / w
    H = size * h / w

    def px(x, y):
        return (x - x0) * sx, H - (y - y0) * sx

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{H:.0f}" '
           f'viewBox="0 0 {size} {H:.3f}">',
           f'<rect x="0" y="0" width="{size}" height="{H:.3f}" fill="white" stroke="black"/>']
    for lo, hi, fill in rects:
        ax, ay = px(lo[0], hi[1])
        out.append(f'<rect x="{ax:.3f}" y="{ay:.3f}" width="{(hi[0] - lo[0]) * sx:.3f}" '
                   f'height="{(hi[1] - lo[1]) * sx:.3f}" fill="{fill}" fill-opacity="0.6"/>')
    palette = colors or ["#1f77b4", "#ff7f0e", "#2ca02c", "#9467bd", "#8c564b"]
    for k, path in enumerate(paths):
        pts = " ".join("{:.3f},{:.3f}".format(*px(p[0], p[1])) for p in path)
        out.append(f'<polyline points="{pts}" fill="none" stroke="{palette[k % len(palette)]}" '
                   f'stroke-width="1" stroke-opacity="0.7"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
