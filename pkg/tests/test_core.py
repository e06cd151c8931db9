from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coopsim.core import (
    ArcLengthPath,
    Footprint,
    ObjectState,
    Pose2D,
    ValidationError,
    box_corners,
    point_to_footprint_distance,
    seconds_to_us,
    transform_to_sensor,
    transform_to_world,
    us_to_seconds,
    wrap_angle,
)

coord = st.floats(-200, 200, allow_nan=False)
angle = st.floats(-20, 20, allow_nan=False)
dim = st.floats(0.2, 10, allow_nan=False)


def _obj(x=1.0, y=0.0, yaw=0.0, v=(0.0, 0.0)) -> ObjectState:
    return ObjectState((x, y, 0.7), (4.5, 1.9, 1.5), yaw, v, confidence=0.8, timestamp=123, source_id=4)


@given(angle)
def test_wrap_angle_range(a):
    w = wrap_angle(a)
    assert -math.pi < w <= math.pi
    assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-9)
    assert math.isclose(math.sin(w), math.sin(a), abs_tol=1e-9)


def test_wrap_angle_pi_is_kept_positive():
    assert wrap_angle(math.pi) == pytest.approx(math.pi)
    assert wrap_angle(-math.pi) == pytest.approx(math.pi)


def test_time_conversion_is_integer_microseconds():
    assert seconds_to_us(0.1) == 100_000
    assert isinstance(seconds_to_us(1.0), int)
    assert us_to_seconds(2_500_000) == 2.5


@given(coord, coord, angle)
def test_pose_compose_inverse_is_identity(x, y, th):
    p = Pose2D(x, y, th)
    e = p.compose(p.inverse())
    assert abs(e.x) < 1e-9 and abs(e.y) < 1e-9 and abs(wrap_angle(e.theta)) < 1e-9
    assert -math.pi < p.theta <= math.pi


def test_pose_rejects_non_finite():
    with pytest.raises(ValidationError):
        Pose2D(float("nan"), 0, 0)


def test_transform_identity_pose():
    w = transform_to_world(_obj(), Pose2D(0, 0, 0))
    assert w.center[:2] == pytest.approx((1.0, 0.0))
    assert w.yaw == pytest.approx(0.0)


def test_transform_quarter_turn():
    w = transform_to_world(_obj(v=(2.0, 0.0)), Pose2D(0, 0, math.pi / 2))
    assert w.center[:2] == pytest.approx((0.0, 1.0), abs=1e-12)
    assert w.yaw == pytest.approx(math.pi / 2)
    assert w.velocity == pytest.approx((0.0, 2.0), abs=1e-12)
    # z, size, class, confidence, timestamp untouched
    assert (w.center[2], w.size, w.class_id, w.confidence, w.timestamp) == (0.7, (4.5, 1.9, 1.5), _obj().class_id, 0.8, 123)


@given(coord, coord, angle, coord, coord, angle, st.floats(-20, 20), st.floats(-20, 20))
def test_transform_round_trip(ox, oy, oyaw, px, py, pth, vx, vy):
    obj = _obj(ox, oy, oyaw, (vx, vy))
    pose = Pose2D(px, py, pth)
    back = transform_to_sensor(transform_to_world(obj, pose), pose)
    assert np.allclose(back.center, obj.center, atol=1e-9)
    assert np.allclose(back.velocity, obj.velocity, atol=1e-9)
    assert abs(wrap_angle(back.yaw - obj.yaw)) < 1e-9


@given(st.lists(st.tuples(coord, coord), min_size=2, max_size=6), coord, coord, angle)
def test_rigid_transform_preserves_distances(centers, px, py, pth):
    pose = Pose2D(px, py, pth)
    objs = [_obj(x, y) for x, y in centers]
    world = [transform_to_world(o, pose) for o in objs]
    for i in range(len(objs)):
        for j in range(i + 1, len(objs)):
            d0 = np.linalg.norm(objs[i].xy - objs[j].xy)
            d1 = np.linalg.norm(world[i].xy - world[j].xy)
            assert abs(d0 - d1) < 1e-9


def test_transform_rejects_bad_pose():
    with pytest.raises(ValidationError):
        transform_to_world(_obj(), (0, 0, 0))  # type: ignore[arg-type]


def test_object_state_validation():
    with pytest.raises(ValidationError):
        ObjectState((0, 0, 0), (0, 1, 1), 0, (0, 0))
    with pytest.raises(ValidationError):
        ObjectState((0, 0, 0), (1, 1, 1), 0, (0, 0), confidence=1.5)
    with pytest.raises(ValidationError):
        ObjectState((0, float("inf"), 0), (1, 1, 1), 0, (0, 0))
    assert -math.pi < ObjectState((0, 0, 0), (1, 1, 1), 7.0, (0, 0)).yaw <= math.pi


def test_footprint_distance_examples():
    sq = Footprint(box_corners(0, 0, 1, 1, 0))
    assert point_to_footprint_distance(sq.centroid, sq) == 0.0
    assert point_to_footprint_distance((2.0, 0.0), sq) == pytest.approx(1.5)


def test_degenerate_footprint_rejected():
    with pytest.raises(ValidationError):
        Footprint(np.array([[0, 0], [1, 0], [2, 0], [3, 0]], dtype=float))
    with pytest.raises(ValidationError):
        point_to_footprint_distance((0, 0), np.zeros((4, 2)))


def test_footprint_orientation_is_normalized():
    cw = box_corners(0, 0, 2, 1, 0)[::-1]
    assert Footprint(cw).contains((0.1, 0.1))


def _dense_boundary_distance(p, corners, n=10_000):
    per = n // 4
    pts = []
    for a, b in zip(corners, np.roll(corners, -1, axis=0)):
        t = np.linspace(0, 1, per, endpoint=False)[:, None]
        pts.append(a + t * (b - a))
    pts = np.concatenate(pts)
    return float(np.min(np.linalg.norm(pts - p, axis=1)))


@settings(max_examples=60)
@given(coord, coord, coord, coord, dim, dim, angle)
def test_footprint_distance_matches_dense_sampling(px, py, cx, cy, length, width, yaw):
    f = Footprint(box_corners(cx / 20, cy / 20, length, width, yaw))
    p = np.array([px / 10, py / 10])
    d = point_to_footprint_distance(p, f)
    if f.contains(p):
        assert d == 0.0
    else:
        assert d == pytest.approx(_dense_boundary_distance(p, f.corners), abs=1e-3)


@given(coord, coord, st.floats(-1, 1), st.floats(-1, 1), dim, dim, angle)
def test_footprint_distance_is_1_lipschitz(px, py, dx, dy, length, width, yaw):
    f = Footprint(box_corners(0, 0, length, width, yaw))
    p, q = np.array([px, py]) / 10, np.array([px + dx, py + dy]) / 10
    assert abs(point_to_footprint_distance(p, f) - point_to_footprint_distance(q, f)) <= np.linalg.norm(p - q) + 1e-9


def test_arc_length_path_sampling_and_normals():
    t = np.linspace(0, math.pi, 400)
    poly = np.column_stack([30 * np.cos(t), 30 * np.sin(t)])
    path = ArcLengthPath.from_polyline(poly, 0.5)
    gaps = np.linalg.norm(np.diff(path.points, axis=0), axis=1)
    assert np.all(np.abs(gaps - 0.5) <= 0.005)
    assert np.allclose(np.linalg.norm(path.normals, axis=1), 1.0, atol=1e-9)
    tangent = np.column_stack([np.cos(path.headings), np.sin(path.headings)])
    assert np.all(np.abs(np.einsum("ij,ij->i", tangent, path.normals)) < 1e-6)


@pytest.mark.parametrize("radius", [10.0, 25.0, 60.0])
def test_arc_curvature_matches_inverse_radius(radius):
    ds = radius / 50
    t = np.linspace(0, math.pi / 2, 2000)
    path = ArcLengthPath.from_polyline(np.column_stack([radius * np.cos(t), radius * np.sin(t)]), ds)
    inner = path.curvature[3:-3]
    assert np.all(np.abs(inner - 1 / radius) <= 0.02 / radius)


def test_path_position_offset_goes_left_and_project_inverts_it():
    path = ArcLengthPath.from_polyline(np.array([[0.0, 0.0], [50.0, 0.0]]), 0.5)
    assert path.position(10.0, 2.0) == pytest.approx([10.0, 2.0])
    s, lat = path.project((12.3, -1.5))
    assert (s, lat) == pytest.approx((12.3, -1.5))


def test_path_speed_limits_follow_vertices():
    path = ArcLengthPath.from_polyline(np.array([[0.0, 0.0], [10.0, 0.0], [20.0, 0.0]]), 0.5, np.array([5.0, 8.0, 8.0]))
    assert path.limit_at(4.0) == 5.0
    assert path.limit_at(15.0) == 8.0


def test_path_needs_two_distinct_vertices():
    with pytest.raises(ValidationError):
        ArcLengthPath.from_polyline(np.array([[1.0, 1.0], [1.0, 1.0]]))
