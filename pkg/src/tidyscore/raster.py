"""Rendering of scenes into scorer input grids and PPM images.

The scorer input is a ``(3, 64, 96)`` float array:

* channel 0 -- occupancy, 1 inside any footprint;
* channel 1 -- instance id, ``(k + 1) / 64`` inside ``obj_<k>``;
* channel 2 -- category id, ``(c + 1) / 16`` inside objects of category ``c``.

Grid row ``r`` covers table ``y`` in ``[r, r+1) * depth / 64`` and column ``c``
covers ``x`` in ``[c, c+1) * width / 96``.  A cell belongs to an object iff
its center lies strictly inside the footprint.
"""
from __future__ import annotations

import colorsys
import zlib

import numpy as np

from .errors import CapacityExceeded
from .scene import EPS, SceneState, object_index

GRID_H = 64
GRID_W = 96
CHANNELS = 3
MAX_INSTANCE = 63
MAX_CATEGORY = 15

PPM_W = 384
PPM_H = 256

RasterImage = np.ndarray


def _centers(n: int, extent: float) -> np.ndarray:
    return (np.arange(n) + 0.5) * (extent / n)


def _span(centers: np.ndarray, lo: float, hi: float) -> tuple[int, int]:
    """Index range of centers strictly inside ``(lo, hi)``."""
    start = int(np.searchsorted(centers, lo + EPS, side="right"))
    stop = int(np.searchsorted(centers, hi - EPS, side="left"))
    return start, max(start, stop)


def category_indices(scene: SceneState) -> dict[str, int]:
    """Category -> index, by first appearance in object-index order."""
    out: dict[str, int] = {}
    for p in sorted(scene.placements, key=lambda p: object_index(p.id)):
        if p.object.category not in out:
            out[p.object.category] = len(out)
    return out


def rasterize(scene: SceneState) -> RasterImage:
    cats = category_indices(scene)
    if len(cats) > MAX_CATEGORY + 1:
        raise CapacityExceeded(f"{len(cats)} categories exceed the raster limit of {MAX_CATEGORY + 1}")
    img = np.zeros((CHANNELS, GRID_H, GRID_W))
    cx = _centers(GRID_W, scene.table_width)
    cy = _centers(GRID_H, scene.table_depth)
    for p in scene.placements:
        k = object_index(p.id)
        if k > MAX_INSTANCE:
            raise CapacityExceeded(f"{p.id} exceeds the maximum instance index {MAX_INSTANCE}")
        x0, y0, x1, y1 = p.box
        c0, c1 = _span(cx, x0, x1)
        r0, r1 = _span(cy, y0, y1)
        img[0, r0:r1, c0:c1] = 1.0
        img[1, r0:r1, c0:c1] = (k + 1) / (MAX_INSTANCE + 1)
        img[2, r0:r1, c0:c1] = (cats[p.object.category] + 1) / (MAX_CATEGORY + 1)
    return img


def category_color(category: str) -> tuple[int, int, int]:
    hue = (zlib.crc32(category.encode("utf-8")) % 360) / 360.0
    r, g, b = colorsys.hsv_to_rgb(hue, 0.55, 0.9)
    return (int(round(r * 255)), int(round(g * 255)), int(round(b * 255)))


def to_ppm(scene: SceneState) -> bytes:
    """Binary P6 image, 384x256, table ``y`` pointing up."""
    label = np.full((PPM_H, PPM_W), -1, dtype=np.int64)
    px = _centers(PPM_W, scene.table_width)
    py = _centers(PPM_H, scene.table_depth)
    colors = np.full((len(scene.placements) + 1, 3), 255, dtype=np.uint8)
    for i, p in enumerate(scene.placements):
        x0, y0, x1, y1 = p.box
        c0, c1 = _span(px, x0, x1)
        r0, r1 = _span(py, y0, y1)
        label[r0:r1, c0:c1] = i
        colors[i] = category_color(p.object.category)
    padded = np.pad(label, 1, constant_values=-1)
    edge = np.zeros_like(label, dtype=bool)
    for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        nb = padded[1 + dr : 1 + dr + PPM_H, 1 + dc : 1 + dc + PPM_W]
        edge |= nb != label
    edge &= label >= 0
    # background maps to the trailing white row
    rgb = colors[np.where(label >= 0, label, len(scene.placements))]
    rgb[edge] = 0
    rgb = rgb[::-1]
    return f"P6\n{PPM_W} {PPM_H}\n255\n".encode("ascii") + rgb.tobytes()
