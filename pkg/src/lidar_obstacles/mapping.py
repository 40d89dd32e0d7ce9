"""Occupancy grid container and map-update operations."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable, Sequence

import numpy as np

from .core import Detection, PointCloud
from .errors import FrameMismatch, GeometryMismatch


class CellState(IntEnum):
    # Values follow the usual occupancy-grid message convention.
    UNKNOWN = -1
    FREE = 0
    OCCUPIED = 100


@dataclass(frozen=True, eq=False)
class OccupancyGrid:
    """Planar trinary raster.

    ``cells`` has shape ``(height, width)``; row 0 is the row with the smallest
    grid-frame y. ``origin`` is the ``(x, y, yaw)`` pose of the outer corner of
    cell (0, 0) in the map frame.
    """

    width: int
    height: int
    resolution: float
    origin: tuple[float, float, float]
    cells: np.ndarray
    frame_id: str = "map"

    def __post_init__(self):
        width, height = int(self.width), int(self.height)
        if width < 0 or height < 0:
            raise ValueError("grid dimensions must be non-negative")
        resolution = float(self.resolution)
        if not (resolution > 0 and math.isfinite(resolution)):
            raise ValueError("resolution must be positive")
        cells = np.array(self.cells, dtype=np.int8, copy=True)
        if cells.size != width * height:
            raise ValueError(f"cells has {cells.size} entries, expected {width * height}")
        cells = cells.reshape(height, width)
        bad = ~np.isin(cells, (CellState.UNKNOWN, CellState.FREE, CellState.OCCUPIED))
        if bad.any():
            raise ValueError("cells must hold only UNKNOWN, FREE or OCCUPIED")
        cells.setflags(write=False)
        ox, oy, oyaw = (float(v) for v in self.origin)
        object.__setattr__(self, "width", width)
        object.__setattr__(self, "height", height)
        object.__setattr__(self, "resolution", resolution)
        object.__setattr__(self, "origin", (ox, oy, oyaw))
        object.__setattr__(self, "cells", cells)

    @classmethod
    def filled(cls, width: int, height: int, resolution: float, origin=(0.0, 0.0, 0.0),
               state: CellState = CellState.UNKNOWN, frame_id: str = "map") -> "OccupancyGrid":
        cells = np.full((height, width), int(state), dtype=np.int8)
        return cls(width, height, resolution, tuple(origin), cells, frame_id)

    def with_cells(self, cells: np.ndarray) -> "OccupancyGrid":
        return OccupancyGrid(self.width, self.height, self.resolution, self.origin, cells, self.frame_id)

    def _with_trusted_cells(self, cells: np.ndarray) -> "OccupancyGrid":
        # For cells derived from this grid by writing valid states: skips validation.
        grid = object.__new__(OccupancyGrid)
        for name in ("width", "height", "resolution", "origin", "frame_id"):
            object.__setattr__(grid, name, getattr(self, name))
        cells.setflags(write=False)
        object.__setattr__(grid, "cells", cells)
        return grid

    def same_geometry(self, other: "OccupancyGrid") -> bool:
        return (self.width == other.width and self.height == other.height
                and self.resolution == other.resolution and self.origin == other.origin
                and self.frame_id == other.frame_id)

    def state(self, col: int, row: int) -> CellState:
        return CellState(int(self.cells[row, col]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, OccupancyGrid):
            return NotImplemented
        return self.same_geometry(other) and np.array_equal(self.cells, other.cells)

    __hash__ = None


def world_to_grid_frame(grid: OccupancyGrid, x, y):
    """Rotate/translate map-frame coordinates into the grid's own axes."""
    ox, oy, yaw = grid.origin
    dx = np.asarray(x, dtype=np.float64) - ox
    dy = np.asarray(y, dtype=np.float64) - oy
    if yaw == 0.0:
        return dx, dy
    c, s = math.cos(yaw), math.sin(yaw)
    return c * dx + s * dy, -s * dx + c * dy


def world_to_cells(grid: OccupancyGrid, x, y) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized cell lookup: returns ``(cols, rows, inside)``.

    ``cols``/``rows`` are only meaningful where ``inside`` is true.
    """
    gx, gy = world_to_grid_frame(grid, x, y)
    cols = np.floor(gx / grid.resolution)
    rows = np.floor(gy / grid.resolution)
    inside = (cols >= 0) & (cols < grid.width) & (rows >= 0) & (rows < grid.height)
    cols = np.where(inside, cols, 0).astype(np.intp)
    rows = np.where(inside, rows, 0).astype(np.intp)
    return cols, rows, inside


def world_to_cell(grid: OccupancyGrid, x: float, y: float) -> tuple[int, int] | None:
    """Return ``(col, row)`` of the cell containing ``(x, y)``, or None when off the grid."""
    gx, gy = world_to_grid_frame(grid, x, y)
    col = math.floor(float(gx) / grid.resolution)
    row = math.floor(float(gy) / grid.resolution)
    if 0 <= col < grid.width and 0 <= row < grid.height:
        return col, row
    return None


def cell_to_world(grid: OccupancyGrid, col, row):
    """Map-frame coordinates of cell centers."""
    gx = (np.asarray(col, dtype=np.float64) + 0.5) * grid.resolution
    gy = (np.asarray(row, dtype=np.float64) + 0.5) * grid.resolution
    ox, oy, yaw = grid.origin
    c, s = math.cos(yaw), math.sin(yaw)
    return ox + c * gx - s * gy, oy + s * gx + c * gy


def _cell_centers(grid: OccupancyGrid) -> tuple[np.ndarray, np.ndarray]:
    rows, cols = np.indices((grid.height, grid.width))
    return cell_to_world(grid, cols, rows)


def footprint_mask(grid: OccupancyGrid, det: Detection,
                   centers: tuple[np.ndarray, np.ndarray] | None = None) -> np.ndarray:
    """Boolean (height, width) mask of cells whose center lies in the detection footprint."""
    cx, cy = centers if centers is not None else _cell_centers(grid)
    c, s = math.cos(det.yaw), math.sin(det.yaw)
    dx = cx - det.center.x
    dy = cy - det.center.y
    along = c * dx + s * dy
    across = -s * dx + c * dy
    return (np.abs(along) <= det.extents[0] / 2) & (np.abs(across) <= det.extents[1] / 2)


def mark_detections(grid: OccupancyGrid, detections: Sequence[Detection]) -> OccupancyGrid:
    """Return a copy of ``grid`` with every cell covered by a detection footprint occupied.

    A cell is covered when its center lies inside (or on the edge of) the yawed
    footprint rectangle. Footprints hanging off the grid are clipped.
    """
    if not detections or grid.width == 0 or grid.height == 0:
        return grid
    cells = grid.cells.copy()
    res = grid.resolution
    ox, oy, yaw = grid.origin
    c, s = math.cos(yaw), math.sin(yaw)
    for det in detections:
        corners = det.footprint_corners()
        gx = c * (corners[:, 0] - ox) + s * (corners[:, 1] - oy)
        gy = -s * (corners[:, 0] - ox) + c * (corners[:, 1] - oy)
        # Window of candidate cells, padded by one to absorb rounding.
        c0 = max(int(math.floor(gx.min() / res)) - 1, 0)
        c1 = min(int(math.floor(gx.max() / res)) + 2, grid.width)
        r0 = max(int(math.floor(gy.min() / res)) - 1, 0)
        r1 = min(int(math.floor(gy.max() / res)) + 2, grid.height)
        if c0 >= c1 or r0 >= r1:
            continue
        rows, cols = np.ogrid[r0:r1, c0:c1]
        centers = cell_to_world(grid, cols, rows)
        inside = footprint_mask(grid, det, centers)
        window = cells[r0:r1, c0:c1]
        window[inside] = CellState.OCCUPIED
    return grid._with_trusted_cells(cells)


def build_local_map(template: OccupancyGrid, obstacle_cloud: PointCloud) -> OccupancyGrid:
    """Grid with ``template``'s geometry: cells hit by any point occupied, all others unknown."""
    if obstacle_cloud.frame_id != template.frame_id:
        raise FrameMismatch(f"cloud is in {obstacle_cloud.frame_id!r}, map is {template.frame_id!r}")
    cells = np.full((template.height, template.width), int(CellState.UNKNOWN), dtype=np.int8)
    xyz = obstacle_cloud.xyz
    cols, rows, inside = world_to_cells(template, xyz[:, 0], xyz[:, 1])
    cells[rows[inside], cols[inside]] = CellState.OCCUPIED
    return template._with_trusted_cells(cells)


def reset(grid: OccupancyGrid, baseline: OccupancyGrid) -> OccupancyGrid:
    """Drop every runtime marking by returning ``baseline``."""
    if not grid.same_geometry(baseline):
        raise GeometryMismatch("grid and baseline differ in size, resolution, origin or frame")
    return baseline


def occupied_cells(grid: OccupancyGrid) -> set[tuple[int, int]]:
    rows, cols = np.nonzero(grid.cells == CellState.OCCUPIED)
    return set(zip(cols.tolist(), rows.tolist()))


def grid_from_states(states: Iterable[Iterable[CellState]], resolution: float,
                     origin=(0.0, 0.0, 0.0), frame_id: str = "map") -> OccupancyGrid:
    arr = np.asarray([[int(s) for s in row] for row in states], dtype=np.int8)
    height, width = arr.shape
    return OccupancyGrid(width, height, resolution, tuple(origin), arr, frame_id)
