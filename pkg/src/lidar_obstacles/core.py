"""Frame-tagged geometric primitives: points, clouds, rigid transforms, planes, detections."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import FrameMismatch, NonFinitePoint

HALF_PI = math.pi / 2


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Point3:
    x: float
    y: float
    z: float

    def __post_init__(self):
        for name in ("x", "y", "z"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise NonFinitePoint(f"{name}={value!r} is not finite")
            object.__setattr__(self, name, value)

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.z)


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Ordered points stored as a read-only ``(n, 3)`` float64 array.

    Construction rejects NaN and infinite coordinates with :class:`NonFinitePoint`.
    """

    xyz: np.ndarray
    frame_id: str = "sensor"
    stamp: int = 0

    def __post_init__(self):
        xyz = np.array(self.xyz, dtype=np.float64, copy=True).reshape(-1, 3)
        if not np.isfinite(xyz).all():
            bad = int(np.flatnonzero(~np.isfinite(xyz).all(axis=1))[0])
            raise NonFinitePoint(f"point {bad} has non-finite coordinates")
        stamp = int(self.stamp)
        if stamp < 0:
            raise ValueError("stamp must be non-negative")
        object.__setattr__(self, "xyz", _readonly(xyz))
        object.__setattr__(self, "stamp", stamp)

    @classmethod
    def from_points(cls, points: Iterable[Point3 | Sequence[float]], frame_id: str = "sensor",
                    stamp: int = 0) -> "PointCloud":
        rows = [p.as_tuple() if isinstance(p, Point3) else tuple(p) for p in points]
        return cls(np.asarray(rows, dtype=np.float64).reshape(-1, 3), frame_id, stamp)

    @classmethod
    def _trusted(cls, xyz: np.ndarray, frame_id: str, stamp: int) -> "PointCloud":
        # Skips validation; callers guarantee a finite float64 (n, 3) array derived from a valid cloud.
        cloud = object.__new__(cls)
        xyz = np.ascontiguousarray(xyz, dtype=np.float64)
        object.__setattr__(cloud, "xyz", _readonly(xyz))
        object.__setattr__(cloud, "frame_id", frame_id)
        object.__setattr__(cloud, "stamp", stamp)
        return cloud

    def with_points(self, xyz: np.ndarray) -> "PointCloud":
        return PointCloud._trusted(xyz, self.frame_id, self.stamp)

    def subset(self, mask_or_indices: np.ndarray) -> "PointCloud":
        return self.with_points(self.xyz[mask_or_indices])

    @property
    def points(self) -> list[Point3]:
        return [Point3(*row) for row in self.xyz.tolist()]

    def __len__(self) -> int:
        return self.xyz.shape[0]

    def __getitem__(self, i: int) -> Point3:
        return Point3(*self.xyz[i].tolist())

    def __eq__(self, other) -> bool:
        if not isinstance(other, PointCloud):
            return NotImplemented
        return (self.frame_id == other.frame_id and self.stamp == other.stamp
                and np.array_equal(self.xyz, other.xyz))

    __hash__ = None


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_yaw(yaw: float) -> tuple[float, float, float, float]:
    return (math.cos(yaw / 2), 0.0, 0.0, math.sin(yaw / 2))


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Maps points from ``child_frame`` into ``parent_frame``: ``p' = R p + t``.

    ``rotation`` is a quaternion ``(w, x, y, z)``, normalized on construction.
    """

    rotation: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    parent_frame: str = "map"
    child_frame: str = "sensor"
    _matrix: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.isfinite(q).all() and np.isfinite(t).all()):
            raise ValueError("transform components must be finite")
        norm = float(np.linalg.norm(q))
        if norm == 0.0:
            raise ValueError("rotation quaternion has zero norm")
        q = q / norm
        object.__setattr__(self, "rotation", tuple(float(v) for v in q))
        object.__setattr__(self, "translation", tuple(float(v) for v in t))
        object.__setattr__(self, "_matrix", _readonly(quat_to_matrix(q)))

    @classmethod
    def identity(cls, frame: str = "map", child: str | None = None) -> "RigidTransform":
        return cls(parent_frame=frame, child_frame=frame if child is None else child)

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0), parent_frame: str = "map",
                 child_frame: str = "sensor") -> "RigidTransform":
        return cls(quat_from_yaw(yaw), tuple(translation), parent_frame, child_frame)

    @property
    def matrix(self) -> np.ndarray:
        return self._matrix

    def apply(self, xyz: np.ndarray) -> np.ndarray:
        return np.asarray(xyz, dtype=np.float64) @ self._matrix.T + np.asarray(self.translation)

    def inverse(self) -> "RigidTransform":
        w, x, y, z = self.rotation
        conj = np.array([w, -x, -y, -z])
        t = -(quat_to_matrix(conj) @ np.asarray(self.translation))
        return RigidTransform(tuple(conj), tuple(t), self.child_frame, self.parent_frame)

    def almost_equal(self, other: "RigidTransform", tol: float = 1e-9) -> bool:
        # q and -q encode the same rotation.
        qa, qb = np.asarray(self.rotation), np.asarray(other.rotation)
        same_rot = np.allclose(qa, qb, atol=tol, rtol=0) or np.allclose(qa, -qb, atol=tol, rtol=0)
        return (same_rot and np.allclose(self.translation, other.translation, atol=tol, rtol=0)
                and self.parent_frame == other.parent_frame and self.child_frame == other.child_frame)

    def __eq__(self, other) -> bool:
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return (self.rotation == other.rotation and self.translation == other.translation
                and self.parent_frame == other.parent_frame and self.child_frame == other.child_frame)

    __hash__ = None


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Return the transform equal to applying ``b`` first, then ``a``."""
    if a.child_frame != b.parent_frame:
        raise FrameMismatch(f"cannot chain {a.child_frame!r} -> {b.parent_frame!r}")
    q = quat_multiply(np.asarray(a.rotation), np.asarray(b.rotation))
    if q[0] < 0:
        q = -q
    t = a.matrix @ np.asarray(b.translation) + np.asarray(a.translation)
    return RigidTransform(tuple(q), tuple(t), a.parent_frame, b.child_frame)


def transform_cloud(cloud: PointCloud, tf: RigidTransform) -> PointCloud:
    if cloud.frame_id != tf.child_frame:
        raise FrameMismatch(f"cloud is in {cloud.frame_id!r}, transform expects {tf.child_frame!r}")
    return PointCloud._trusted(tf.apply(cloud.xyz), tf.parent_frame, cloud.stamp)


@dataclass(frozen=True)
class Plane:
    """Plane ``{p : normal . p + d = 0}`` with unit normal and ``normal.z >= 0``."""

    normal: tuple[float, float, float]
    d: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64).reshape(3)
        norm = float(np.linalg.norm(n))
        if not math.isfinite(norm) or norm == 0.0:
            raise ValueError("plane normal must be a non-zero finite vector")
        d = float(self.d) / norm
        n = n / norm
        if n[2] < 0:
            n, d = -n, -d
        object.__setattr__(self, "normal", tuple(float(v) for v in n))
        object.__setattr__(self, "d", d)

    def distances(self, xyz: np.ndarray) -> np.ndarray:
        """Unsigned perpendicular distance of each row of ``xyz``."""
        return np.abs(xyz @ np.asarray(self.normal) + self.d)

    def tilt(self) -> float:
        """Angle in radians between the normal and the vertical axis."""
        return math.acos(min(1.0, self.normal[2]))


def normalize_yaw(yaw: float, length: float, width: float) -> tuple[float, float, float]:
    """Fold a rectangle's yaw into ``[0, pi/2)``; a quarter-turn swaps length and width."""
    if 0.0 <= yaw < HALF_PI:
        return yaw, length, width
    quarters = math.floor(yaw / HALF_PI)
    folded = yaw - quarters * HALF_PI
    if folded >= HALF_PI:
        folded, quarters = 0.0, quarters + 1
    elif folded < 0.0:
        folded = 0.0
    if quarters % 2:
        length, width = width, length
    return folded, length, width


@dataclass(frozen=True)
class Detection:
    """Oriented box in the map frame.

    ``extents[0]`` runs along the yaw direction, ``extents[1]`` across it, and
    ``extents[2]`` is the height. Any yaw is accepted and folded into ``[0, pi/2)``.
    """

    center: Point3
    extents: tuple[float, float, float]
    yaw: float
    point_count: int
    cluster_id: int

    def __post_init__(self):
        center = self.center if isinstance(self.center, Point3) else Point3(*self.center)
        length, width, height = (float(v) for v in self.extents)
        if not all(math.isfinite(v) and v > 0 for v in (length, width, height)):
            raise ValueError(f"extents must be positive, got {self.extents!r}")
        yaw = float(self.yaw)
        if not math.isfinite(yaw):
            raise ValueError("yaw must be finite")
        yaw, length, width = normalize_yaw(yaw, length, width)
        if int(self.point_count) < 1:
            raise ValueError("point_count must be positive")
        if int(self.cluster_id) < 0:
            raise ValueError("cluster_id must be non-negative")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "extents", (length, width, height))
        object.__setattr__(self, "yaw", yaw)
        object.__setattr__(self, "point_count", int(self.point_count))
        object.__setattr__(self, "cluster_id", int(self.cluster_id))

    @property
    def footprint_area(self) -> float:
        return self.extents[0] * self.extents[1]

    def footprint_corners(self) -> np.ndarray:
        """Four (x, y) corners of the footprint, counter-clockwise."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        hl, hw = self.extents[0] / 2, self.extents[1] / 2
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.center.x, self.center.y])
