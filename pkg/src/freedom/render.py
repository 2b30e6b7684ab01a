"""Grayscale density images of 2-D samples or grid posteriors, as PGM files."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .oracle import GridPosterior


class RenderError(ValueError):
    pass


@dataclass(frozen=True)
class ImageSpec:
    """Pixel grid over ``bounds = ((x_lo, x_hi), (y_lo, y_hi))``.

    Row 0 is the top of the image (largest y). ``mapping`` is ``linear`` or
    ``log``; the log map compresses ``log_range`` decades into 0..255.
    """

    bounds: tuple = ((-6.0, 6.0), (-6.0, 6.0))
    width: int = 128
    height: int = 128
    mapping: str = "linear"
    log_range: float = 3.0

    def __post_init__(self):
        if self.mapping not in ("linear", "log"):
            raise RenderError(f"mapping must be 'linear' or 'log', got {self.mapping!r}")
        if self.width < 1 or self.height < 1:
            raise RenderError("image needs at least one pixel")
        (x0, x1), (y0, y1) = self.bounds
        if not (x1 > x0 and y1 > y0):
            raise RenderError("empty image bounds")

    def edges(self):
        (x0, x1), (y0, y1) = self.bounds
        return np.linspace(x0, x1, self.width + 1), np.linspace(y0, y1, self.height + 1)

    def pixel_of(self, point) -> tuple:
        """(row, col) of the pixel containing ``point``."""
        (x0, x1), (y0, y1) = self.bounds
        col = int(np.floor((point[0] - x0) / (x1 - x0) * self.width))
        row = self.height - 1 - int(np.floor((point[1] - y0) / (y1 - y0) * self.height))
        return row, col


def _mass_image(points, weights, spec: ImageSpec) -> np.ndarray:
    ex, ey = spec.edges()
    h, _, _ = np.histogram2d(points[:, 0], points[:, 1], bins=(ex, ey), weights=weights)
    return h.T[::-1]  # (height, width), top row = high y


def density_image(data, spec: ImageSpec) -> np.ndarray:
    """Mass per pixel (float) from samples ``(n, 2)`` or a :class:`GridPosterior`."""
    if isinstance(data, GridPosterior):
        if len(data.axes) != 2:
            raise RenderError("grid table must be 2-D")
        return _mass_image(data.points(), data.masses.ravel(), spec)
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 2:
        raise RenderError(f"expected 2-D samples of shape (n, 2), got {x.shape}")
    return _mass_image(x, None, spec)


def to_gray(img: np.ndarray, mapping: str = "linear", log_range: float = 3.0) -> np.ndarray:
    top = float(img.max())
    if top <= 0:
        return np.zeros(img.shape, dtype=np.uint8)
    v = img / top
    if mapping == "log":
        floor = 10.0**-log_range
        v = np.log10(np.maximum(v, floor)) / log_range + 1.0
        v[img <= 0] = 0.0
    return np.rint(np.clip(v, 0.0, 1.0) * 255).astype(np.uint8)


def render_density(data, spec: ImageSpec | None = None) -> np.ndarray:
    """Row-major 8-bit raster of the density of ``data``."""
    spec = spec or ImageSpec()
    return to_gray(density_image(data, spec), spec.mapping, spec.log_range)


def write_pgm(raster: np.ndarray, path, binary: bool = True, comment: str | None = None):
    """Write P5 (binary) or P2 (ASCII) graymap."""
    raster = np.asarray(raster)
    if raster.ndim != 2 or raster.dtype != np.uint8:
        raise RenderError("raster must be a 2-D uint8 array")
    h, w = raster.shape
    head = "P5" if binary else "P2"
    lines = [head]
    if comment:
        lines += [f"# {c}" for c in comment.splitlines()]
    lines += [f"{w} {h}", "255"]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if binary:
        path.write_bytes(("\n".join(lines) + "\n").encode() + raster.tobytes())
    else:
        body = "\n".join(" ".join(str(int(v)) for v in row) for row in raster)
        path.write_text("\n".join(lines) + "\n" + body + "\n")
    return path


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end].decode())
        pos = end
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise RenderError("only 8-bit graymaps are supported")
    if magic == "P5":
        return np.frombuffer(data[pos + 1:pos + 1 + w * h], dtype=np.uint8).reshape(h, w).copy()
    if magic == "P2":
        vals = np.array(data[pos:].split(), dtype=np.int64)
        return vals[: w * h].astype(np.uint8).reshape(h, w)
    raise RenderError(f"unsupported magic {magic!r}")
