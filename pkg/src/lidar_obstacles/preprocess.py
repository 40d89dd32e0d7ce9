"""Voxel-grid reduction, RANSAC floor detection/removal, and occupancy-map filtration."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .core import Plane, PointCloud
from .errors import DegenerateInput, FrameMismatch, NoFloorFound
from .mapping import CellState, OccupancyGrid, cell_to_world, world_to_cell, world_to_cells

__all__ = [
    "VoxelParams", "RansacParams", "OutOfBoundsPolicy",
    "voxel_downsample", "sample_triples", "fit_floor_ransac", "remove_floor",
    "filter_by_map", "world_to_cell", "world_to_cells", "cell_to_world",
]


@dataclass(frozen=True)
class VoxelParams:
    leaf_size: float = 0.05
    min_points_per_voxel: int = 1
    representative: str = "centroid"

    def __post_init__(self):
        if not (self.leaf_size > 0 and math.isfinite(self.leaf_size)):
            raise ValueError("leaf_size must be positive")
        if int(self.min_points_per_voxel) < 1:
            raise ValueError("min_points_per_voxel must be >= 1")
        if self.representative not in ("centroid", "cell_center"):
            raise ValueError("representative must be 'centroid' or 'cell_center'")


@dataclass(frozen=True)
class RansacParams:
    distance_threshold: float = 0.02
    max_iterations: int = 100
    seed: int = 0
    max_normal_tilt: float = math.radians(30.0)
    min_inlier_fraction: float = 0.0

    def __post_init__(self):
        if not self.distance_threshold > 0:
            raise ValueError("distance_threshold must be positive")
        if int(self.max_iterations) < 1:
            raise ValueError("max_iterations must be >= 1")
        if not 0.0 <= self.max_normal_tilt <= math.pi / 2:
            raise ValueError("max_normal_tilt must lie in [0, pi/2]")
        if not 0.0 <= self.min_inlier_fraction <= 1.0:
            raise ValueError("min_inlier_fraction must lie in [0, 1]")


class OutOfBoundsPolicy(str, Enum):
    KEEP = "keep"
    DROP = "drop"


def _cell_order(idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Stable order of points by cell index (``idx`` is ``(3, n)``), plus cell run starts."""
    n = idx.shape[1]
    lo = idx.min(axis=1)
    span = idx.max(axis=1) - lo + 1
    shift = max(int(n - 1).bit_length(), 1)
    cells = float(span[0]) * float(span[1]) * float(span[2])
    if cells * 2.0 ** shift < 2.0 ** 62:
        key = (idx[0] - lo[0]) * span[1]
        key += idx[1] - lo[1]
        key *= span[2]
        key += idx[2] - lo[2]
        # Packing the point index into the low bits makes a plain value sort stable and cheap.
        key <<= shift
        key |= np.arange(n)
        key.sort()
        order = key & ((1 << shift) - 1)
        key >>= shift
        starts = np.flatnonzero(np.r_[True, key[1:] != key[:-1]])
    else:
        order = np.lexsort((idx[2], idx[1], idx[0]))
        sidx = idx[:, order]
        starts = np.flatnonzero(np.r_[True, (sidx[:, 1:] != sidx[:, :-1]).any(axis=0)])
    return order, starts


def voxel_downsample(cloud: PointCloud, params: VoxelParams) -> PointCloud:
    """Replace the points of each sufficiently populated cubic cell with one representative.

    Cells are anchored at the world origin (index ``floor(coord / leaf)``) and the
    output is ordered by cell index ``(ix, iy, iz)``.
    """
    n = len(cloud)
    if n == 0:
        return cloud
    leaf = params.leaf_size
    cols = np.ascontiguousarray(cloud.xyz.T)
    idx = np.floor(cols / leaf).astype(np.int64)
    order, starts = _cell_order(idx)
    m = starts.size
    counts = np.diff(np.r_[starts, n])
    keep = counts >= params.min_points_per_voxel
    first = order[starts[keep]]
    if params.representative == "cell_center":
        return cloud.with_points(((idx[:, first] + 0.5) * leaf).T)
    cell = np.empty(n, dtype=np.intp)
    cell[order] = np.repeat(np.arange(m), counts)
    out = np.empty((3, int(keep.sum())))
    for axis in range(3):
        out[axis] = np.bincount(cell, cols[axis], m)[keep]
    out /= counts[keep]
    # A rounded mean can land a hair outside its cell; pull those back onto member bounds.
    stray = np.flatnonzero((np.floor(out / leaf).astype(np.int64) != idx[:, first]).any(axis=0))
    if stray.size:
        kstarts = starts[keep]
        ends = np.r_[starts[1:], n][keep]
        for k in stray.tolist():
            members = cols[:, order[kstarts[k]:ends[k]]]
            out[:, k] = np.clip(out[:, k], members.min(axis=1), members.max(axis=1))
    return cloud.with_points(out.T)


def sample_triples(n: int, iterations: int, seed: int) -> np.ndarray:
    """Deterministic ``(iterations, 3)`` array of distinct indices in ``[0, n)``.

    Generator: numpy ``PCG64(seed)``; one ``random((iterations, 3))`` draw of
    uniforms ``u``. Per row, ``a = floor(u0 n)``; ``b = floor(u1 (n-1))`` shifted
    up by one if ``b >= a``; ``c = floor(u2 (n-2))`` shifted up past ``min(a, b)``
    and then past ``max(a, b)``. This yields uniformly random distinct triples.
    """
    if n < 3:
        raise DegenerateInput(f"need at least 3 points, got {n}")
    u = np.random.Generator(np.random.PCG64(seed)).random((iterations, 3))
    a = np.minimum((u[:, 0] * n).astype(np.int64), n - 1)
    b = np.minimum((u[:, 1] * (n - 1)).astype(np.int64), n - 2)
    b += b >= a
    c = np.minimum((u[:, 2] * (n - 2)).astype(np.int64), n - 3)
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    c += c >= lo
    c += c >= hi
    return np.stack([a, b, c], axis=1)


def _candidate_planes(xyz: np.ndarray, triples: np.ndarray):
    p0, p1, p2 = xyz[triples[:, 0]], xyz[triples[:, 1]], xyz[triples[:, 2]]
    e1, e2 = p1 - p0, p2 - p0
    normals = np.cross(e1, e2)
    norms = np.linalg.norm(normals, axis=1)
    scale = np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1)
    valid = norms > 1e-12 * scale
    safe = np.where(valid, norms, 1.0)
    normals = normals / safe[:, None]
    flip = normals[:, 2] < 0
    normals[flip] *= -1
    d = -np.einsum("ij,ij->i", normals, p0)
    return normals, d, valid


def _score_planes(xyz: np.ndarray, normals: np.ndarray, d: np.ndarray, tau: float,
                  chunk: int = 8) -> np.ndarray:
    """Inlier count of each plane; works in small row blocks that stay in cache."""
    cols = np.ascontiguousarray(xyz.T)
    k, n = normals.shape[0], cols.shape[1]
    scores = np.empty(k, dtype=np.int64)
    buf = np.empty((min(chunk, k), n))
    hits = np.empty(buf.shape, dtype=bool)
    for s in range(0, k, chunk):
        m = min(chunk, k - s)
        block, mask = buf[:m], hits[:m]
        np.matmul(normals[s:s + m], cols, out=block)
        block += d[s:s + m, None]
        np.abs(block, out=block)
        np.less_equal(block, tau, out=mask)
        scores[s:s + m] = [np.count_nonzero(row) for row in mask]
    return scores


def fit_floor_ransac(cloud: PointCloud, params: RansacParams) -> tuple[Plane, np.ndarray]:
    """Find the dominant near-horizontal plane.

    Each iteration fits a plane through three sampled points (see
    :func:`sample_triples`); candidates tilted more than ``max_normal_tilt`` from
    vertical are discarded, the rest scored by the number of points within
    ``distance_threshold``. Highest score wins, earliest iteration on ties.
    Returns the plane and the ascending indices of its inliers.
    """
    xyz = cloud.xyz
    n = xyz.shape[0]
    if n < 3:
        raise DegenerateInput(f"need at least 3 points, got {n}")
    triples = sample_triples(n, int(params.max_iterations), int(params.seed))
    normals, d, valid = _candidate_planes(xyz, triples)
    if not valid.any():
        raise DegenerateInput("every sampled triple was collinear")
    upright = valid & (normals[:, 2] >= math.cos(params.max_normal_tilt))
    cand = np.flatnonzero(upright)
    if cand.size == 0:
        raise NoFloorFound("no candidate plane within the allowed tilt")

    tau = params.distance_threshold
    scores = _score_planes(xyz, normals[cand], d[cand], tau)
    best = int(cand[int(np.argmax(scores))])
    plane = Plane(tuple(normals[best]), float(d[best]))
    inliers = np.flatnonzero(plane.distances(xyz) <= tau)
    if inliers.size / n < params.min_inlier_fraction:
        raise NoFloorFound(f"best plane explains {inliers.size}/{n} points")
    return plane, inliers


def remove_floor(cloud: PointCloud, plane: Plane, tau: float) -> PointCloud:
    """Keep points farther than ``tau`` from ``plane``, in their original order."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    return cloud.subset(plane.distances(cloud.xyz) > tau)


def filter_by_map(cloud: PointCloud, grid: OccupancyGrid,
                  policy: OutOfBoundsPolicy | str = OutOfBoundsPolicy.KEEP) -> PointCloud:
    """Drop points that fall in occupied map cells (z is ignored).

    Free and unknown cells keep their points; points off the grid follow ``policy``.
    """
    if cloud.frame_id != grid.frame_id:
        raise FrameMismatch(f"cloud is in {cloud.frame_id!r}, map is {grid.frame_id!r}")
    policy = OutOfBoundsPolicy(policy)
    xyz = cloud.xyz
    if xyz.shape[0] == 0:
        return cloud
    cols, rows, inside = world_to_cells(grid, xyz[:, 0], xyz[:, 1])
    if grid.width and grid.height:
        occupied = grid.cells[rows, cols] == CellState.OCCUPIED
    else:
        occupied = np.zeros(xyz.shape[0], dtype=bool)
    keep = np.where(inside, ~occupied, policy is OutOfBoundsPolicy.KEEP)
    return cloud.subset(keep)
