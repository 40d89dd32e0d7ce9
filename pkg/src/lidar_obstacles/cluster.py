"""KD-tree index, Euclidean cluster extraction, and oriented-rectangle fitting."""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import HALF_PI, Detection, Point3, PointCloud, normalize_yaw
from .errors import EmptyCluster

MIN_EXTENT = 1e-6
DEFAULT_LEAF_SIZE = 16


@dataclass(frozen=True)
class ClusterParams:
    tolerance: float = 0.3
    min_cluster_size: int = 10
    max_cluster_size: int = 25000

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if not 1 <= self.min_cluster_size <= self.max_cluster_size:
            raise ValueError("need 1 <= min_cluster_size <= max_cluster_size")


@dataclass(frozen=True)
class ObbParams:
    angle_step: float = math.radians(0.5)
    z_from_cluster: bool = True

    def __post_init__(self):
        if not 0 < self.angle_step <= math.pi / 4:
            raise ValueError("angle_step must lie in (0, pi/4]")


class KdTree:
    """Balanced 3-d tree stored in flat arrays.

    Every node splits at the median along its axis of largest extent (first
    axis wins ties; equal coordinates are ordered by original index) until a
    node holds at most ``leaf_size`` points. Points are stored in tree order
    so each node's members are one contiguous slice.
    """

    def __init__(self, xyz: np.ndarray, leaf_size: int = DEFAULT_LEAF_SIZE):
        if leaf_size < 1:
            raise ValueError("leaf_size must be >= 1")
        xyz = np.ascontiguousarray(xyz, dtype=np.float64).reshape(-1, 3)
        self.leaf_size = leaf_size
        self.size = n = xyz.shape[0]
        perm = np.arange(n, dtype=np.intp)
        cols = np.ascontiguousarray(xyz.T)
        # Per-axis rank of every point, ties by index: one integer sort key per level.
        by_axis = np.argsort(cols, axis=1, kind="stable")
        rank = np.empty_like(by_axis)
        np.put_along_axis(rank, by_axis, np.arange(n)[None, :].repeat(3, axis=0), axis=1)
        shift = max(int(n - 1).bit_length(), 1)

        starts, ends, lefts, rights, axes, los, his = [], [], [], [], [], [], []
        front_s = np.array([0] if n else [], dtype=np.intp)
        front_e = np.array([n] if n else [], dtype=np.intp)
        next_id = len(front_s)
        while front_s.size:
            lengths = front_e - front_s
            offsets = np.cumsum(lengths) - lengths
            pos = np.arange(offsets[-1] + lengths[-1]) + np.repeat(front_s - offsets, lengths)
            members = perm[pos]
            pts = cols[:, members]
            lo = np.minimum.reduceat(pts, offsets, axis=1).T
            hi = np.maximum.reduceat(pts, offsets, axis=1).T
            split = lengths > leaf_size
            axis = np.where(split, np.argmax(hi - lo, axis=1), -1)
            left = np.full(front_s.size, -1, dtype=np.intp)
            right = np.full(front_s.size, -1, dtype=np.intp)
            n_split = int(split.sum())
            left[split] = next_id + 2 * np.arange(n_split)
            right[split] = left[split] + 1
            next_id += 2 * n_split
            starts.append(front_s), ends.append(front_e), lefts.append(left)
            rights.append(right), axes.append(axis), los.append(lo), his.append(hi)
            if not n_split:
                break
            seg = np.repeat(np.arange(front_s.size), lengths)
            take = split[seg]
            seg, pos, members = seg[take], pos[take], members[take]
            seg_axis = axis[seg]
            key = seg << shift
            key |= rank[seg_axis, members]
            key.sort()
            # Segments are already contiguous in pos order, so sorted keys line up with pos.
            perm[pos] = by_axis[seg_axis, key & ((1 << shift) - 1)]
            s, e = front_s[split], front_e[split]
            mid = s + (e - s) // 2
            front_s = np.empty(2 * s.size, dtype=np.intp)
            front_e = np.empty(2 * s.size, dtype=np.intp)
            front_s[0::2], front_s[1::2] = s, mid
            front_e[0::2], front_e[1::2] = mid, e

        def cat(parts, dtype, shape=(0,)):
            return np.concatenate(parts).astype(dtype) if parts else np.empty(shape, dtype=dtype)

        self.perm = perm
        self.points = np.ascontiguousarray(xyz[perm])
        self.start = cat(starts, np.intp)
        self.end = cat(ends, np.intp)
        self.left = cat(lefts, np.intp)
        self.right = cat(rights, np.intp)
        self.axis = cat(axes, np.intp)
        self.lo = cat(los, np.float64, (0, 3))
        self.hi = cat(his, np.float64, (0, 3))
        self.is_leaf = self.left < 0

    @property
    def node_count(self) -> int:
        return self.start.size

    def radius_search(self, query, r: float) -> np.ndarray:
        """Ascending source indices of points within distance ``r`` (inclusive) of ``query``."""
        if r < 0:
            raise ValueError("radius must be non-negative")
        if self.size == 0:
            return np.empty(0, dtype=np.intp)
        q = np.asarray(query.as_tuple() if isinstance(query, Point3) else query, dtype=np.float64)
        qx, qy, qz = float(q[0]), float(q[1]), float(q[2])
        r2 = r * r
        lo, hi, pts = self.lo, self.hi, self.points
        found = []
        stack = [0]
        while stack:
            node = stack.pop()
            # Clamped gaps never exceed the true per-axis distance, so pruning stays exact.
            gx = max(lo[node, 0] - qx, 0.0, qx - hi[node, 0])
            gy = max(lo[node, 1] - qy, 0.0, qy - hi[node, 1])
            gz = max(lo[node, 2] - qz, 0.0, qz - hi[node, 2])
            if gx * gx + gy * gy + gz * gz > r2:
                continue
            if self.is_leaf[node]:
                s, e = self.start[node], self.end[node]
                block = pts[s:e]
                dx = block[:, 0] - qx
                dy = block[:, 1] - qy
                dz = block[:, 2] - qz
                hit = np.flatnonzero(dx * dx + dy * dy + dz * dz <= r2)
                if hit.size:
                    found.append(self.perm[s + hit])
            else:
                stack.append(self.right[node])
                stack.append(self.left[node])
        if not found:
            return np.empty(0, dtype=np.intp)
        return np.sort(np.concatenate(found))

    def leaf_pairs(self, r: float) -> tuple[np.ndarray, np.ndarray]:
        """Pairs of leaf nodes ``(a, b)`` whose boxes lie within ``r``; includes ``(a, a)``.

        Found by a breadth-first dual-tree descent from ``(root, root)``.
        """
        if self.size == 0:
            return np.empty(0, dtype=np.intp), np.empty(0, dtype=np.intp)
        r2 = r * r
        leaves = np.flatnonzero(self.is_leaf)
        if leaves.size <= 256:
            # Small trees: one dense gap matrix is cheaper than the descent and yields the same set.
            lo, hi = self.lo[leaves], self.hi[leaves]
            gap2 = np.zeros((leaves.size, leaves.size))
            for axis in range(3):
                g = np.maximum(lo[:, None, axis] - hi[None, :, axis], lo[None, :, axis] - hi[:, None, axis])
                np.maximum(g, 0.0, out=g)
                gap2 += g * g
            i, j = np.nonzero(np.triu(gap2 <= r2))
            return leaves[i], leaves[j]
        a = np.zeros(1, dtype=np.intp)
        b = np.zeros(1, dtype=np.intp)
        out_a, out_b = [], []
        count = self.end - self.start
        while a.size:
            gap = np.maximum(np.maximum(self.lo[a] - self.hi[b], self.lo[b] - self.hi[a]), 0.0)
            near = (gap[:, 0] * gap[:, 0] + gap[:, 1] * gap[:, 1] + gap[:, 2] * gap[:, 2]) <= r2
            a, b = a[near], b[near]
            la, lb = self.is_leaf[a], self.is_leaf[b]
            done = la & lb
            out_a.append(a[done]), out_b.append(b[done])
            a, b, la, lb = a[~done], b[~done], la[~done], lb[~done]
            same = a == b
            # Self pairs (internal): (L, L), (L, R), (R, R).
            sa = a[same]
            sl, sr = self.left[sa], self.right[sa]
            # Other pairs: descend into the internal (or larger) side.
            oa, ob, ola, olb = a[~same], b[~same], la[~same], lb[~same]
            split_a = ~ola & (olb | (count[oa] >= count[ob]))
            xa, xb = oa[split_a], ob[split_a]
            ya, yb = oa[~split_a], ob[~split_a]
            a = np.concatenate([sl, sl, sr, self.left[xa], self.right[xa], ya, ya])
            b = np.concatenate([sl, sr, sr, xb, xb, self.left[yb], self.right[yb]])
        return np.concatenate(out_a), np.concatenate(out_b)


def build_kdtree(cloud: PointCloud, leaf_size: int = DEFAULT_LEAF_SIZE) -> KdTree:
    return KdTree(cloud.xyz, leaf_size)


def radius_search(tree: KdTree, query, r: float) -> np.ndarray:
    return tree.radius_search(query, r)


def _ranges(starts: np.ndarray, ends: np.ndarray) -> np.ndarray:
    """Concatenation of ``arange(s, e)`` for each pair."""
    sizes = ends - starts
    return np.arange(sizes.sum()) + np.repeat(starts - np.r_[0, np.cumsum(sizes)[:-1]], sizes)


def _dist2_ok(lo_gap: np.ndarray, r2: float) -> np.ndarray:
    return lo_gap[:, 0] * lo_gap[:, 0] + lo_gap[:, 1] * lo_gap[:, 1] + lo_gap[:, 2] * lo_gap[:, 2] <= r2


def _components(n: int, src: list, dst: list) -> np.ndarray:
    """Smallest member index of each point's component, by root hooking and pointer jumping."""
    src = np.concatenate(src) if src else np.empty(0, dtype=np.intp)
    dst = np.concatenate(dst) if dst else np.empty(0, dtype=np.intp)
    parent = np.arange(n)
    while src.size:
        a, b = parent[src], parent[dst]
        split = a != b
        if not split.any():
            break
        src, dst, a, b = src[split], dst[split], a[split], b[split]
        # Both ends are roots here; hang the larger root under the smaller one.
        np.minimum.at(parent, np.maximum(a, b), np.minimum(a, b))
        while True:
            up = parent[parent]
            if np.array_equal(up, parent):
                break
            parent = up
    return parent


class _LeafBlocks:
    """Leaf members padded to a common width, for batched leaf-vs-leaf distance tests."""

    def __init__(self, tree: KdTree, leaves: np.ndarray):
        start, end = tree.start[leaves], tree.end[leaves]
        sizes = end - start
        width = int(sizes.max())
        self.slot = np.full(tree.node_count, -1, dtype=np.intp)
        self.slot[leaves] = np.arange(leaves.size)
        self.xyz = np.full((3, leaves.size, width), np.nan)
        self.idx = np.full((leaves.size, width), -1, dtype=np.intp)
        rows = np.repeat(np.arange(leaves.size), sizes)
        cols = np.arange(sizes.sum()) - np.repeat(np.r_[0, np.cumsum(sizes)[:-1]], sizes)
        flat = _ranges(start, end)
        self.xyz[:, rows, cols] = tree.points[flat].T
        self.idx[rows, cols] = tree.perm[flat]

    def hits(self, a: np.ndarray, b: np.ndarray, r2: float) -> np.ndarray:
        """``(len(a), width, width)`` mask of member pairs within range."""
        sa, sb = self.slot[a], self.slot[b]
        px, py, pz = self.xyz
        d = px[sa][:, :, None] - px[sb][:, None, :]
        acc = d * d
        d = py[sa][:, :, None] - py[sb][:, None, :]
        acc += d * d
        d = pz[sa][:, :, None] - pz[sb][:, None, :]
        acc += d * d
        return acc <= r2

    def rep_hits(self, a: np.ndarray, b: np.ndarray, rep_xyz: np.ndarray, r2: float) -> np.ndarray:
        """``(len(a), width)`` mask: members of leaf ``b`` within range of leaf ``a``'s first point."""
        sb = self.slot[b]
        q = rep_xyz[a]
        px, py, pz = self.xyz
        d = px[sb] - q[:, 0, None]
        acc = d * d
        d = py[sb] - q[:, 1, None]
        acc += d * d
        d = pz[sb] - q[:, 2, None]
        acc += d * d
        return acc <= r2


def cluster_labels(tree: KdTree, r: float, chunk: int = 256) -> np.ndarray:
    """Component label of every source point in the ``distance <= r`` graph.

    A leaf whose box diagonal is within ``r`` is a clique, and two leaves whose
    boxes lie wholly within ``r`` of each other are fully linked; neither needs
    distance tests. The remaining close leaf pairs are first probed from each
    leaf's first point; pairs whose points are still split across components
    after that are tested member by member.
    """
    n = tree.size
    if n == 0:
        return np.empty(0, dtype=np.intp)
    la, lb = tree.leaf_pairs(r)
    r2 = r * r
    perm, start, end, lo, hi = tree.perm, tree.start, tree.end, tree.lo, tree.hi
    rep = perm[start]
    leaves = np.flatnonzero(tree.is_leaf)
    tight = np.zeros(tree.node_count, dtype=bool)
    tight[leaves] = _dist2_ok(hi[leaves] - lo[leaves], r2)
    src, dst = [], []

    # Stars inside clique leaves.
    tl = leaves[tight[leaves]]
    src.append(perm[_ranges(start[tl], end[tl])])
    dst.append(np.repeat(rep[tl], end[tl] - start[tl]))

    self_pair = la == lb
    whole = _dist2_ok(np.maximum(np.abs(hi[la] - lo[lb]), np.abs(hi[lb] - lo[la])), r2)
    wa, wb = la[whole & ~self_pair], lb[whole & ~self_pair]
    for x, y in ((wa, wb), (wb, wa)):
        src.append(perm[_ranges(start[x], end[x])])
        dst.append(np.repeat(rep[y], end[x] - start[x]))

    partial = ~whole & ~(self_pair & tight[la])
    la, lb = la[partial], lb[partial]
    if la.size == 0:
        return _components(n, src, dst)

    blocks = _LeafBlocks(tree, leaves)
    rep_xyz = np.empty((tree.node_count, 3))
    rep_xyz[leaves] = tree.points[start[leaves]]
    for x, y in ((la, lb), (lb, la)):
        hit = blocks.rep_hits(x, y, rep_xyz, r2)
        p, j = np.nonzero(hit)
        src.append(rep[x[p]])
        dst.append(blocks.idx[blocks.slot[y[p]], j])
    labels = _components(n, src, dst)

    # Leaf pairs that already share a single label cannot change the partition.
    tree_labels = labels[perm]
    leaf_min = np.zeros(tree.node_count, dtype=labels.dtype)
    leaf_max = np.zeros(tree.node_count, dtype=labels.dtype)
    by_start = leaves[np.argsort(start[leaves])]  # leaves tile the tree order
    leaf_min[by_start] = np.minimum.reduceat(tree_labels, start[by_start])
    leaf_max[by_start] = np.maximum.reduceat(tree_labels, start[by_start])
    settled = ((leaf_min[la] == leaf_max[la]) & (leaf_min[lb] == leaf_max[lb])
               & (leaf_min[la] == leaf_min[lb]))
    la, lb = la[~settled], lb[~settled]
    if la.size == 0:
        return labels
    for s in range(0, la.size, chunk):
        ca, cb = la[s:s + chunk], lb[s:s + chunk]
        p, i, j = np.nonzero(blocks.hits(ca, cb, r2))
        src.append(blocks.idx[blocks.slot[ca[p]], i])
        dst.append(blocks.idx[blocks.slot[cb[p]], j])
    return _components(n, src, dst)


def euclidean_cluster(cloud: PointCloud, params: ClusterParams,
                      tree: KdTree | None = None) -> list[np.ndarray]:
    """Connected components of the ``distance <= tolerance`` graph, size-filtered.

    Each cluster is an ascending index array; clusters are ordered by their
    smallest member.
    """
    n = len(cloud)
    if n == 0:
        return []
    if tree is None:
        tree = build_kdtree(cloud)
    labels = cluster_labels(tree, params.tolerance)
    order = np.argsort(labels, kind="stable")
    bounds = np.flatnonzero(np.r_[True, labels[order][1:] != labels[order][:-1], True])
    sizes = np.diff(bounds)
    ok = np.flatnonzero((sizes >= params.min_cluster_size) & (sizes <= params.max_cluster_size))
    clusters = [order[bounds[k]:bounds[k + 1]] for k in ok.tolist()]
    clusters.sort(key=lambda c: int(c[0]))
    return clusters


def search_angles(step: float) -> np.ndarray:
    """``0, step, 2*step, ...`` strictly below pi/2."""
    k = np.arange(int(math.ceil(HALF_PI / step)) + 1)
    angles = k * step
    return angles[angles < HALF_PI]


@functools.lru_cache(maxsize=8)
def _rotations(step: float):
    """Search angles, their cos/sin, and a ``(2, 2m)`` matrix projecting onto both box axes."""
    angles = search_angles(step)
    cos, sin = np.cos(angles), np.sin(angles)
    axes = np.concatenate([np.stack([cos, sin]), np.stack([-sin, cos])], axis=1)
    for a in (angles, cos, sin, axes):
        a.setflags(write=False)
    return angles, cos, sin, axes


def fit_obb(cloud: PointCloud, cluster: Sequence[int] | np.ndarray, params: ObbParams,
            cluster_id: int = 0) -> Detection:
    """Minimal-area yawed box by rotation search over the members' floor projection.

    The projected members are rotated about their centroid in ``angle_step``
    increments over ``[0, pi/2)``; the angle whose axis-aligned bounding
    rectangle has the smallest area wins (smaller angle on ties).
    """
    idx = np.asarray(cluster, dtype=np.intp)
    if idx.size == 0:
        raise EmptyCluster("cannot fit a box to an empty cluster")
    pts = cloud.xyz[idx]
    xy = pts[:, :2]
    centroid = xy.mean(axis=0)
    rel = xy - centroid
    angles, cos, sin, axes = _rotations(float(params.angle_step))
    uv = rel @ axes
    lo, hi = uv.min(axis=0), uv.max(axis=0)
    m = angles.size
    u_lo, u_hi, v_lo, v_hi = lo[:m], hi[:m], lo[m:], hi[m:]
    areas = (u_hi - u_lo) * (v_hi - v_lo)
    k = int(np.argmin(areas))
    theta, c, s = float(angles[k]), float(cos[k]), float(sin[k])
    uc, vc = (u_lo[k] + u_hi[k]) / 2, (v_lo[k] + v_hi[k]) / 2
    cx = centroid[0] + uc * c - vc * s
    cy = centroid[1] + uc * s + vc * c
    length = max(float(u_hi[k] - u_lo[k]), MIN_EXTENT)
    width = max(float(v_hi[k] - v_lo[k]), MIN_EXTENT)
    if params.z_from_cluster:
        z_lo, z_hi = float(pts[:, 2].min()), float(pts[:, 2].max())
    else:
        z_lo = z_hi = 0.0
    height = max(z_hi - z_lo, MIN_EXTENT)
    return Detection(Point3(float(cx), float(cy), (z_lo + z_hi) / 2), (length, width, height),
                     theta, int(idx.size), cluster_id)


def convex_hull(points_2d) -> np.ndarray:
    """Counter-clockwise hull vertices (monotone chain), collinear points dropped."""
    pts = sorted(set(map(tuple, np.asarray(points_2d, dtype=np.float64).reshape(-1, 2).tolist())))
    if len(pts) <= 2:
        return np.asarray(pts, dtype=np.float64).reshape(-1, 2)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.asarray(lower[:-1] + upper[:-1], dtype=np.float64)


def min_area_rect_calipers(points_2d) -> tuple[float, tuple[float, float], float]:
    """Exact minimal-area enclosing rectangle: ``(yaw, (along, across), area)``.

    The optimum has a side collinear with a hull edge, so every edge direction
    is tried. Zero widths (single point, collinear input) are floored at 1e-6.
    """
    hull = convex_hull(points_2d)
    if hull.shape[0] == 0:
        raise ValueError("need at least one point")
    if hull.shape[0] == 1:
        return 0.0, (MIN_EXTENT, MIN_EXTENT), MIN_EXTENT * MIN_EXTENT
    best = None
    m = hull.shape[0]
    for i in range(m):
        ex, ey = hull[(i + 1) % m] - hull[i]
        theta = math.atan2(ey, ex) % HALF_PI
        c, s = math.cos(theta), math.sin(theta)
        u = hull[:, 0] * c + hull[:, 1] * s
        v = hull[:, 1] * c - hull[:, 0] * s
        along = max(float(u.max() - u.min()), MIN_EXTENT)
        across = max(float(v.max() - v.min()), MIN_EXTENT)
        area = along * across
        if best is None or area < best[2]:
            best = (theta, (along, across), area)
    theta, (along, across), area = best
    theta, along, across = normalize_yaw(theta, along, across)
    return theta, (along, across), area
