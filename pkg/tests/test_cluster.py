import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import calipers_area, cluster_partition, linear_radius

from lidar_obstacles.cluster import (ClusterParams, KdTree, ObbParams, build_kdtree, cluster_labels,
                                     euclidean_cluster, fit_obb, min_area_rect_calipers, radius_search,
                                     search_angles)
from lidar_obstacles.core import HALF_PI, Point3, PointCloud
from lidar_obstacles.errors import EmptyCluster


def cloud(xyz):
    return PointCloud(np.asarray(xyz, dtype=float))


# ---------------------------------------------------------------- KD-tree

def test_empty_and_single():
    tree = build_kdtree(cloud(np.empty((0, 3))))
    assert tree.node_count == 0 and radius_search(tree, Point3(0, 0, 0), 10).size == 0
    one = build_kdtree(cloud([(1, 2, 3)]))
    assert one.node_count == 1 and one.is_leaf[0]
    assert radius_search(one, Point3(1, 2, 3), 0.0).tolist() == [0]


def test_small_radius_is_empty():
    xyz = np.random.default_rng(0).uniform(0, 1, (100, 3))
    tree = build_kdtree(cloud(xyz))
    q = np.array([5.0, 5.0, 5.0])
    r = np.linalg.norm(xyz - q, axis=1).min() * 0.999
    assert radius_search(tree, q, r).size == 0


@pytest.mark.parametrize("leaf_size", [1, 3, 16, 64])
def test_radius_matches_linear_scan(leaf_size):
    rng = np.random.default_rng(leaf_size)
    xyz = rng.uniform(-1, 1, (2000, 3))
    xyz[:300] = np.round(xyz[:300], 1)  # plenty of exact ties and duplicates
    tree = KdTree(xyz, leaf_size)
    assert sorted(tree.perm.tolist()) == list(range(2000))
    for _ in range(50):
        q = rng.uniform(-1.2, 1.2, 3)
        if rng.random() < 0.3:
            q = xyz[rng.integers(0, 2000)]
        r = float(rng.uniform(0, 0.5))
        assert tree.radius_search(q, r).tolist() == linear_radius(xyz, q, r)


def test_tree_structure():
    rng = np.random.default_rng(1)
    xyz = np.round(rng.uniform(0, 1, (700, 3)) * [4, 1, 2], 1)
    tree = KdTree(xyz, 8)
    for node in range(tree.node_count):
        s, e = tree.start[node], tree.end[node]
        members = tree.perm[s:e]
        pts = xyz[members]
        assert np.array_equal(tree.lo[node], pts.min(axis=0)) and np.array_equal(tree.hi[node], pts.max(axis=0))
        if tree.is_leaf[node]:
            assert e - s <= 8
            continue
        axis = tree.axis[node]
        assert axis == int(np.argmax(pts.max(axis=0) - pts.min(axis=0)))  # first axis wins ties
        left, right = tree.left[node], tree.right[node]
        assert tree.end[left] - tree.start[left] == (e - s) // 2
        lkeys = [(xyz[i, axis], i) for i in tree.perm[tree.start[left]:tree.end[left]]]
        rkeys = [(xyz[i, axis], i) for i in tree.perm[tree.start[right]:tree.end[right]]]
        assert max(lkeys) < min(rkeys)  # median split, equal coordinates by original index


def test_leaf_pairs_dense_and_descent_agree():
    rng = np.random.default_rng(2)
    xyz = rng.uniform(0, 10, (6000, 3))
    tree = KdTree(xyz, 8)  # > 256 leaves: dual-tree descent
    a, b = tree.leaf_pairs(0.4)
    got = {(min(x, y), max(x, y)) for x, y in zip(a.tolist(), b.tolist())}
    leaves = np.flatnonzero(tree.is_leaf)
    lo, hi = tree.lo[leaves], tree.hi[leaves]
    gap = np.maximum(0, np.maximum(lo[:, None] - hi[None], lo[None] - hi[:, None]))
    ok = (gap ** 2).sum(-1) <= 0.16
    i, j = np.nonzero(np.triu(ok))
    want = {(min(x, y), max(x, y)) for x, y in zip(leaves[i].tolist(), leaves[j].tolist())}
    assert got == want


# ---------------------------------------------------------------- clustering

def test_two_far_points_are_two_clusters():
    out = euclidean_cluster(cloud([(0, 0, 0), (3, 0, 0)]), ClusterParams(0.3, 1, 10))
    assert [c.tolist() for c in out] == [[0], [1]]


def test_chain_links_transitively():
    xyz = np.column_stack([np.arange(50) * 0.27, np.zeros(50), np.zeros(50)])
    order = np.random.default_rng(3).permutation(50)
    out = euclidean_cluster(cloud(xyz[order]), ClusterParams(0.3, 1, 100))
    assert [c.tolist() for c in out] == [list(range(50))]


def test_size_filter_and_ordering():
    rng = np.random.default_rng(4)
    blobs = [rng.normal(c, 0.05, (k, 3)) for c, k in (((5, 0, 0), 30), ((0, 0, 0), 5), ((0, 5, 0), 12))]
    xyz = np.vstack(blobs)
    out = euclidean_cluster(cloud(xyz), ClusterParams(0.3, 10, 25))
    assert [c.tolist() for c in out] == [list(range(35, 47))]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_cluster_matches_union_find(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(0, 300))
    xyz = rng.uniform(0, rng.uniform(0.5, 4), (n, 3))
    if seed % 2:
        xyz = np.round(xyz, 1)
    tol = float(rng.uniform(0.02, 0.5))
    lo = int(rng.integers(1, 5))
    out = euclidean_cluster(cloud(xyz), ClusterParams(tol, lo, 10**6))
    assert {frozenset(c.tolist()) for c in out} == cluster_partition(xyz, tol, lo)
    assert all(np.all(np.diff(c) > 0) for c in out)
    assert [int(c[0]) for c in out] == sorted(int(c[0]) for c in out)


def test_cluster_labels_with_various_leaf_sizes():
    rng = np.random.default_rng(5)
    xyz = rng.uniform(0, 3, (400, 3))
    ref = cluster_partition(xyz, 0.2)
    for leaf in (1, 2, 5, 16, 100, 1000):
        labels = cluster_labels(KdTree(xyz, leaf), 0.2)
        got = {frozenset(np.flatnonzero(labels == k).tolist()) for k in np.unique(labels)}
        assert got == ref


# ---------------------------------------------------------------- oriented boxes

def unit_square(theta=0.0):
    c, s = math.cos(theta), math.sin(theta)
    sq = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float) @ np.array([[c, -s], [s, c]]).T
    return np.column_stack([sq, [0.0, 0.0, 0.5, 0.5]])


def test_aligned_square():
    det = fit_obb(cloud(unit_square()), [0, 1, 2, 3], ObbParams())
    assert det.yaw == 0.0
    assert det.extents[:2] == pytest.approx((1, 1), abs=1e-12) and det.extents[2] == 0.5
    assert (det.center.x, det.center.y, det.center.z) == pytest.approx((0.5, 0.5, 0.25))


def test_rotated_square():
    step = math.radians(0.5)
    det = fit_obb(cloud(unit_square(math.radians(30))), [0, 1, 2, 3], ObbParams(step))
    assert abs(det.yaw - math.radians(30)) <= step
    assert det.footprint_area == pytest.approx(1.0, rel=2 * step)


def test_empty_cluster_and_flat_height():
    with pytest.raises(EmptyCluster):
        fit_obb(cloud(unit_square()), [], ObbParams())
    det = fit_obb(cloud([(1, 1, 0)]), [0], ObbParams())
    assert det.extents == (1e-6, 1e-6, 1e-6)


def test_search_angles():
    a = search_angles(math.radians(0.5))
    assert len(a) == 180 and a[0] == 0 and a[-1] < HALF_PI
    assert len(search_angles(math.pi / 4)) == 2


def random_cluster(rng, n=200):
    pts = rng.uniform(-1, 1, (n, 2)) * rng.uniform(0.2, 3, 2)
    th = rng.uniform(0, math.pi)
    pts = pts @ np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]]).T + rng.uniform(-10, 10, 2)
    return np.column_stack([pts, rng.uniform(0, 1, n)])


def contains(det, xy, slack=1e-9):
    c, s = math.cos(det.yaw), math.sin(det.yaw)
    d = xy - [det.center.x, det.center.y]
    u, v = d @ [c, s], d @ [-s, c]
    return (np.abs(u) <= det.extents[0] / 2 + slack).all() and (np.abs(v) <= det.extents[1] / 2 + slack).all()


def test_area_bound_and_containment():
    rng = np.random.default_rng(6)
    step = math.radians(0.5)
    for _ in range(30):
        xyz = random_cluster(rng)
        det = fit_obb(cloud(xyz), np.arange(len(xyz)), ObbParams(step))
        best = calipers_area(xyz[:, :2])
        assert best <= det.footprint_area * (1 + 1e-12)
        assert det.footprint_area <= (1 + 2 * step) * best
        assert contains(det, xyz[:, :2])
        assert 0 <= det.yaw < HALF_PI


def test_area_non_increasing_when_step_halves():
    rng = np.random.default_rng(7)
    for _ in range(10):
        xyz = random_cluster(rng, 80)
        idx = np.arange(len(xyz))
        areas = [fit_obb(cloud(xyz), idx, ObbParams(math.radians(4) / 2**k)).footprint_area for k in range(5)]
        assert all(b <= a for a, b in zip(areas, areas[1:]))


def test_calipers_examples_and_dominance():
    yaw, ext, area = min_area_rect_calipers([(2.0, 3.0)])
    assert ext == (1e-6, 1e-6)
    assert min_area_rect_calipers(unit_square()[:, :2])[2] == pytest.approx(1.0)
    rng = np.random.default_rng(8)
    for _ in range(20):
        xy = random_cluster(rng, 60)
        _, _, area = min_area_rect_calipers(xy[:, :2])
        assert area == pytest.approx(calipers_area(xy[:, :2]), rel=1e-9)
        for step_deg in (0.1, 0.5, 2, 10):
            det = fit_obb(cloud(xy), np.arange(len(xy)), ObbParams(math.radians(step_deg)))
            assert area <= det.footprint_area * (1 + 1e-12)
