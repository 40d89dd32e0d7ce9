"""Static top-down raster of a processed frame: map shades, points, detection outlines."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import Detection, PointCloud
from .errors import UnwritablePath
from .mapping import CellState, OccupancyGrid, world_to_cells

OUTSIDE = (235, 235, 235)
SHADES = {CellState.UNKNOWN: (205, 205, 205), CellState.FREE: (255, 255, 255), CellState.OCCUPIED: (40, 40, 40)}
POINT = (20, 90, 220)
OUTLINE = (220, 30, 30)


@dataclass(frozen=True)
class RenderOptions:
    width: int = 640
    height: int = 480
    margin: float = 0.5  # meters around the content when no map bounds the view
    default_extent: tuple[float, float, float, float] = (-5.0, 5.0, -5.0, 5.0)  # xmin, xmax, ymin, ymax

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")


def _grid_extent(grid: OccupancyGrid) -> tuple[float, float, float, float]:
    ox, oy, yaw = grid.origin
    c, s = math.cos(yaw), math.sin(yaw)
    w, h = grid.width * grid.resolution, grid.height * grid.resolution
    xs = [ox + c * gx - s * gy for gx, gy in ((0, 0), (w, 0), (0, h), (w, h))]
    ys = [oy + s * gx + c * gy for gx, gy in ((0, 0), (w, 0), (0, h), (w, h))]
    return min(xs), max(xs), min(ys), max(ys)


def view_extent(cloud: PointCloud | None, detections: Sequence[Detection], grid: OccupancyGrid | None,
                options: RenderOptions) -> tuple[float, float, float, float]:
    """World rectangle shown: the map when there is one, else the content plus margin."""
    if grid is not None and grid.width and grid.height:
        return _grid_extent(grid)
    xs, ys = [], []
    if cloud is not None and len(cloud):
        xs += [cloud.xyz[:, 0].min(), cloud.xyz[:, 0].max()]
        ys += [cloud.xyz[:, 1].min(), cloud.xyz[:, 1].max()]
    for det in detections:
        corners = det.footprint_corners()
        xs += [corners[:, 0].min(), corners[:, 0].max()]
        ys += [corners[:, 1].min(), corners[:, 1].max()]
    if not xs:
        return options.default_extent
    m = options.margin
    return float(min(xs)) - m, float(max(xs)) + m, float(min(ys)) - m, float(max(ys)) + m


def _line(x0: int, y0: int, x1: int, y1: int) -> list[tuple[int, int]]:
    """Bresenham pixels from (x0, y0) to (x1, y1), inclusive."""
    pixels = []
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx, sy = (1 if x0 < x1 else -1), (1 if y0 < y1 else -1)
    err = dx + dy
    while True:
        pixels.append((x0, y0))
        if x0 == x1 and y0 == y1:
            return pixels
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def render_image(cloud: PointCloud | None, detections: Sequence[Detection], grid: OccupancyGrid | None,
                 options: RenderOptions = RenderOptions()) -> np.ndarray:
    """``(height, width, 3)`` uint8 image; +x to the right, +y up."""
    xmin, xmax, ymin, ymax = view_extent(cloud, detections, grid, options)
    W, H = options.width, options.height
    scale = min(W / max(xmax - xmin, 1e-9), H / max(ymax - ymin, 1e-9))  # pixels per meter
    img = np.empty((H, W, 3), dtype=np.uint8)
    img[:] = OUTSIDE

    def to_px(x, y):
        col = np.floor((np.asarray(x) - xmin) * scale).astype(np.int64)
        row = np.floor((ymax - np.asarray(y)) * scale).astype(np.int64)
        return col, row

    if grid is not None and grid.width and grid.height:
        rows, cols = np.indices((H, W))
        wx = xmin + (cols + 0.5) / scale
        wy = ymax - (rows + 0.5) / scale
        gc, gr, inside = world_to_cells(grid, wx, wy)
        states = grid.cells[gr, gc]
        for state, rgb in SHADES.items():
            img[inside & (states == state)] = rgb

    if cloud is not None and len(cloud):
        col, row = to_px(cloud.xyz[:, 0], cloud.xyz[:, 1])
        ok = (col >= 0) & (col < W) & (row >= 0) & (row < H)
        img[row[ok], col[ok]] = POINT

    for det in detections:
        col, row = to_px(*det.footprint_corners().T)
        corners = list(zip(col.tolist(), row.tolist()))
        for (x0, y0), (x1, y1) in zip(corners, corners[1:] + corners[:1]):
            for x, y in _line(x0, y0, x1, y1):
                if 0 <= x < W and 0 <= y < H:
                    img[y, x] = OUTLINE
    return img


def encode_ppm(img: np.ndarray) -> bytes:
    """Binary portable pixmap (P6, maxval 255)."""
    img = np.ascontiguousarray(img, dtype=np.uint8)
    h, w, _ = img.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def render_topdown(cloud: PointCloud | None, detections: Sequence[Detection], grid: OccupancyGrid | None,
                   output_path: str | Path, options: RenderOptions = RenderOptions()) -> Path:
    """Write the top-down view as a PPM. Same inputs give byte-identical files."""
    data = encode_ppm(render_image(cloud, detections, grid, options))
    path = Path(output_path)
    try:
        path.write_bytes(data)
    except OSError as e:
        raise UnwritablePath(f"cannot write {path}: {e}") from None
    return path
