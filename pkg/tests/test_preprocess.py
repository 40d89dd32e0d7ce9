import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import filter_oracle, floor_scene, lookup_cell, voxel_means

from lidar_obstacles.core import PointCloud
from lidar_obstacles.errors import DegenerateInput, FrameMismatch, NoFloorFound
from lidar_obstacles.mapping import CellState, OccupancyGrid
from lidar_obstacles.preprocess import (OutOfBoundsPolicy, RansacParams, VoxelParams, cell_to_world,
                                        filter_by_map, fit_floor_ransac, remove_floor, sample_triples,
                                        voxel_downsample, world_to_cell)


def cloud(xyz, frame="sensor"):
    return PointCloud(np.asarray(xyz, dtype=float), frame)


# ---------------------------------------------------------------- voxel grid

def test_one_cell_centroid():
    out = voxel_downsample(cloud([(0.1, 0.1, 0.1), (0.3, 0.3, 0.3)]), VoxelParams(1.0))
    assert np.allclose(out.xyz, [[0.2, 0.2, 0.2]], atol=1e-15)


def test_threshold_suppresses_sparse_cells():
    assert len(voxel_downsample(cloud([(0.5, 0.5, 0.5)]), VoxelParams(1.0, 2))) == 0
    assert len(voxel_downsample(cloud(np.empty((0, 3))), VoxelParams())) == 0


def test_matches_hash_map_oracle_10k():
    xyz = np.random.default_rng(0).uniform(0, 10, (10_000, 3))
    out = voxel_downsample(cloud(xyz), VoxelParams(1.0))
    ref = voxel_means(xyz, 1.0)
    keys = sorted(ref)
    assert len(out) == len(keys)
    assert np.allclose(out.xyz, np.array([ref[k] for k in keys]), atol=1e-12, rtol=0)


def test_min_points_and_cell_center_mode():
    rng = np.random.default_rng(1)
    xyz = rng.uniform(-2, 2, (3000, 3))
    ref = voxel_means(xyz, 0.5, min_points=4)
    out = voxel_downsample(cloud(xyz), VoxelParams(0.5, 4))
    assert np.allclose(out.xyz, np.array([ref[k] for k in sorted(ref)]), atol=1e-12)
    centers = voxel_downsample(cloud(xyz), VoxelParams(0.5, 4, "cell_center"))
    assert np.allclose(centers.xyz, (np.array(sorted(ref)) + 0.5) * 0.5)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.01, 0.05, 0.1, 0.3, 1.0]))
def test_centroids_inside_cells_and_idempotent(seed, leaf):
    rng = np.random.default_rng(seed)
    xyz = rng.uniform(-3, 3, (int(rng.integers(1, 400)), 3)) * rng.choice([1e-3, 1.0, 1e3])
    out = voxel_downsample(cloud(xyz), VoxelParams(leaf))
    cells = np.floor(out.xyz / leaf)
    assert len({tuple(c) for c in cells.tolist()}) == len(out)
    occupied = {tuple(c) for c in np.floor(xyz / leaf).tolist()}
    assert {tuple(c) for c in cells.tolist()} <= occupied
    again = voxel_downsample(out, VoxelParams(leaf))
    assert np.array_equal(again.xyz, out.xyz)


def test_output_in_lexicographic_cell_order():
    xyz = np.random.default_rng(2).uniform(-1, 1, (500, 3))
    out = voxel_downsample(cloud(xyz), VoxelParams(0.25))
    idx = [tuple(c) for c in np.floor(out.xyz / 0.25).astype(int).tolist()]
    assert idx == sorted(idx)


# ---------------------------------------------------------------- RANSAC

def test_sampler_matches_documented_scheme():
    n, k, seed = 57, 300, 42
    u = np.random.Generator(np.random.PCG64(seed)).random((k, 3))
    expected = []
    for u0, u1, u2 in u.tolist():
        a = math.floor(u0 * n)
        b = math.floor(u1 * (n - 1))
        b += b >= a
        c = math.floor(u2 * (n - 2))
        c += c >= min(a, b)
        c += c >= max(a, b)
        expected.append((a, b, c))
    got = sample_triples(n, k, seed)
    assert [tuple(r) for r in got.tolist()] == expected
    assert all(len(set(r)) == 3 for r in expected)


def test_exact_plane():
    rng = np.random.default_rng(3)
    xyz = np.column_stack([rng.uniform(-1, 1, 100), rng.uniform(-1, 1, 100), np.zeros(100)])
    plane, inliers = fit_floor_ransac(cloud(xyz), RansacParams(distance_threshold=0.01))
    assert np.allclose(plane.normal, (0, 0, 1)) and abs(plane.d) < 1e-12
    assert inliers.tolist() == list(range(100))


def test_degenerate_inputs():
    with pytest.raises(DegenerateInput):
        fit_floor_ransac(cloud([(0, 0, 0), (1, 0, 0)]), RansacParams())
    line = np.column_stack([np.arange(10.0), np.zeros(10), np.zeros(10)])
    with pytest.raises(DegenerateInput):
        fit_floor_ransac(cloud(line), RansacParams())


def test_no_floor_cases():
    wall = np.random.default_rng(4).uniform(0, 1, (50, 3))
    wall[:, 0] = 0.0  # vertical plane only
    with pytest.raises(NoFloorFound):
        fit_floor_ransac(cloud(wall), RansacParams())
    xyz = floor_scene(5)
    with pytest.raises(NoFloorFound):
        fit_floor_ransac(cloud(xyz), RansacParams(min_inlier_fraction=0.9))


def test_floor_scene_recovery_and_inlier_exactness():
    xyz = floor_scene(6)
    params = RansacParams(distance_threshold=0.02, max_iterations=200, seed=6)
    plane, inliers = fit_floor_ransac(cloud(xyz), params)
    assert math.degrees(plane.tilt()) <= 1.0
    assert np.isin(np.arange(700), inliers).sum() >= 699
    d = np.abs(xyz @ np.array(plane.normal) + plane.d)
    assert inliers.tolist() == np.flatnonzero(d <= 0.02).tolist()
    again = fit_floor_ransac(cloud(xyz), params)
    assert again[0] == plane and np.array_equal(again[1], inliers)


def test_remove_floor_is_complement():
    xyz = floor_scene(7)
    c = cloud(xyz)
    plane, inliers = fit_floor_ransac(c, RansacParams(seed=7))
    kept = remove_floor(c, plane, 0.02)
    rest = np.setdiff1d(np.arange(len(xyz)), inliers)
    assert np.array_equal(kept.xyz, xyz[rest])
    flat = cloud(np.column_stack([np.arange(5.0), np.arange(5.0), np.zeros(5)]))
    assert len(remove_floor(flat, plane.__class__((0, 0, 1), 0), 0.02)) == 0
    above = cloud(xyz[:5] + [0, 0, 1])
    assert remove_floor(above, plane.__class__((0, 0, 1), 0), 0.02) == above


# ---------------------------------------------------------------- map lookups and filtration

def test_world_to_cell_examples():
    grid = OccupancyGrid.filled(10, 10, 0.05)
    assert world_to_cell(grid, 0.07, 0.0) == (1, 0)
    assert world_to_cell(grid, 0.05, 0.0) == (1, 0)
    assert world_to_cell(grid, -0.01, 0.0) is None
    assert world_to_cell(grid, 0.5, 0.1) is None


def test_cell_round_trip_with_yaw():
    rng = np.random.default_rng(8)
    for _ in range(10):
        grid = OccupancyGrid.filled(200, 150, float(rng.uniform(0.02, 0.3)),
                                    (float(rng.uniform(-5, 5)), float(rng.uniform(-5, 5)), float(rng.uniform(-3, 3))))
        for _ in range(100):
            col, row = int(rng.integers(0, 200)), int(rng.integers(0, 150))
            x, y = cell_to_world(grid, col, row)
            assert world_to_cell(grid, float(x), float(y)) == (col, row)
        pts = rng.uniform(-20, 20, (1000, 2))
        for x, y in pts:
            cell = world_to_cell(grid, x, y)
            if cell is not None:
                cx, cy = cell_to_world(grid, *cell)
                # The point lies in the cell: its offset from the center, in grid axes, is at most half a cell.
                yaw = grid.origin[2]
                du = math.cos(yaw) * (x - cx) + math.sin(yaw) * (y - cy)
                dv = -math.sin(yaw) * (x - cx) + math.cos(yaw) * (y - cy)
                assert max(abs(du), abs(dv)) <= grid.resolution / 2 + 1e-9


def random_grid(rng, size=128):
    cells = rng.choice(np.array([-1, 0, 100], dtype=np.int8), size=(size, size))
    origin = (float(rng.uniform(-3, 0)), float(rng.uniform(-3, 0)), float(rng.uniform(-0.5, 0.5)))
    return OccupancyGrid(size, size, 0.05, origin, cells)


def test_filter_examples():
    free = OccupancyGrid.filled(10, 10, 0.1, state=CellState.FREE)
    c = cloud(np.random.default_rng(9).uniform(-0.5, 1.5, (100, 3)), "map")
    assert filter_by_map(c, free) == c
    cells = np.zeros((10, 10), dtype=np.int8)
    cells[3, 2] = CellState.OCCUPIED
    grid = free.with_cells(cells)
    assert len(filter_by_map(cloud([(0.25, 0.35, 1.0)], "map"), grid)) == 0
    with pytest.raises(FrameMismatch):
        filter_by_map(cloud([(0, 0, 0)], "sensor"), grid)


@pytest.mark.parametrize("policy", list(OutOfBoundsPolicy))
def test_filter_matches_lookup_oracle(policy):
    rng = np.random.default_rng(10)
    grid = random_grid(rng)
    xyz = rng.uniform(-4, 8, (5000, 3))
    out = filter_by_map(cloud(xyz, "map"), grid, policy)
    kept = filter_oracle(xyz, grid, keep_outside=policy is OutOfBoundsPolicy.KEEP)
    assert np.array_equal(out.xyz, xyz[kept])
    for x, y, _ in out.xyz.tolist():
        cell = lookup_cell(grid, x, y)
        assert cell is None or grid.cells[cell[1], cell[0]] != CellState.OCCUPIED
