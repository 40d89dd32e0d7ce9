import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lidar_obstacles.core import (HALF_PI, Detection, Plane, Point3, PointCloud, RigidTransform, compose,
                                  normalize_yaw, transform_cloud)
from lidar_obstacles.errors import FrameMismatch, NonFinitePoint


def random_tf(rng, parent="map", child="sensor"):
    return RigidTransform(tuple(rng.normal(size=4)), tuple(rng.uniform(-5, 5, 3)), parent, child)


def quat_rotate(tf, pts):
    """Independent oracle: v' = v + 2w (q x v) + 2 q x (q x v), then translate."""
    w, *q = tf.rotation
    q = np.array(q)
    t = np.cross(q, pts)
    return pts + 2 * w * t + 2 * np.cross(q, t) + np.array(tf.translation)


def test_point_rejects_nan():
    with pytest.raises(NonFinitePoint):
        Point3(0.0, math.nan, 0.0)


def test_cloud_rejects_nonfinite_and_keeps_order():
    with pytest.raises(NonFinitePoint):
        PointCloud(np.array([[0, 0, 0], [1, math.inf, 0]]))
    pts = [(3, 2, 1), (0, 0, 0), (1, 1, 1)]
    cloud = PointCloud.from_points(pts, "sensor", 7)
    assert [p.as_tuple() for p in cloud.points] == [tuple(map(float, p)) for p in pts]
    assert cloud.stamp == 7 and len(cloud) == 3
    with pytest.raises(ValueError):
        cloud.xyz[0, 0] = 1.0  # read-only


def test_identity_transform_keeps_points_and_relabels():
    cloud = PointCloud(np.random.default_rng(0).normal(size=(50, 3)), "sensor", 5)
    out = transform_cloud(cloud, RigidTransform())
    assert out.frame_id == "map" and out.stamp == 5
    assert np.array_equal(out.xyz, cloud.xyz)


def test_pure_translation():
    out = transform_cloud(PointCloud(np.zeros((1, 3))), RigidTransform(translation=(1, 0, 0)))
    assert out.xyz.tolist() == [[1.0, 0.0, 0.0]]


def test_quarter_turn():
    out = transform_cloud(PointCloud(np.array([[1.0, 0, 0]])), RigidTransform.from_yaw(HALF_PI))
    assert np.allclose(out.xyz, [[0, 1, 0]], atol=1e-12, rtol=0)


def test_transform_frame_mismatch():
    with pytest.raises(FrameMismatch):
        transform_cloud(PointCloud(np.zeros((1, 3)), "lidar"), RigidTransform())


def test_compose_identity_and_inverse():
    rng = np.random.default_rng(1)
    for _ in range(20):
        t = random_tf(rng)
        assert compose(t, RigidTransform.identity("sensor")).almost_equal(t)
        ident = compose(t, t.inverse())
        assert ident.almost_equal(RigidTransform.identity("map"))
        assert abs(np.linalg.norm(t.rotation) - 1) < 1e-9


def test_compose_chain_break():
    with pytest.raises(FrameMismatch):
        compose(RigidTransform(parent_frame="map", child_frame="base"),
                RigidTransform(parent_frame="odom", child_frame="sensor"))


def test_compose_matches_sequential_application():
    rng = np.random.default_rng(2)
    for _ in range(10):
        a = random_tf(rng, "map", "base")
        b = random_tf(rng, "base", "sensor")
        pts = rng.uniform(-10, 10, (100, 3))
        expected = quat_rotate(a, quat_rotate(b, pts))
        assert np.allclose(compose(a, b).apply(pts), expected, atol=1e-9, rtol=0)


def test_rigidity_and_round_trip():
    rng = np.random.default_rng(3)
    tf = random_tf(rng)
    cloud = PointCloud(rng.uniform(-3, 3, (60, 3)))
    moved = transform_cloud(cloud, tf)
    d0 = np.linalg.norm(cloud.xyz[:, None] - cloud.xyz[None], axis=-1)
    d1 = np.linalg.norm(moved.xyz[:, None] - moved.xyz[None], axis=-1)
    assert np.allclose(d0, d1, rtol=1e-9, atol=1e-12)
    back = transform_cloud(moved, tf.inverse())
    assert back.frame_id == "sensor"
    assert np.allclose(back.xyz, cloud.xyz, atol=1e-9, rtol=0)


def test_plane_normalizes_and_flips():
    p = Plane((0, 0, -2), 4)
    assert p.normal == (0.0, 0.0, 1.0) and p.d == -2.0
    assert np.allclose(p.distances(np.array([[5, 5, 2], [0, 0, 3]])), [0, 1])


@settings(max_examples=300, deadline=None)
@given(yaw=st.floats(-50, 50), length=st.floats(0.01, 5), width=st.floats(0.01, 5))
def test_detection_yaw_always_folded(yaw, length, width):
    det = Detection(Point3(0, 0, 0), (length, width, 1.0), yaw, 1, 0)
    assert 0.0 <= det.yaw < HALF_PI
    # Same footprint rectangle: the corner set is invariant under the fold.
    c, s = math.cos(yaw), math.sin(yaw)
    local = np.array([[length, width], [-length, width], [-length, -width], [length, -width]]) / 2
    corners = local @ np.array([[c, -s], [s, c]]).T
    got = det.footprint_corners()
    d = np.linalg.norm(corners[:, None] - got[None], axis=-1).min(axis=1)
    assert d.max() < 1e-6


def test_detection_validation():
    with pytest.raises(ValueError):
        Detection(Point3(0, 0, 0), (1, 0, 1), 0, 1, 0)
    with pytest.raises(ValueError):
        Detection(Point3(0, 0, 0), (1, 1, 1), 0, 0, 0)
    assert normalize_yaw(HALF_PI, 2, 1) == (0.0, 1, 2)
