"""Shared geometry, time and object types.

World frame is ENU: x east, y north, yaw counter-clockwise from +x.
Angles are wrapped to (-pi, pi]. Timestamps are integer microseconds since
scenario start.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

US_PER_S = 1_000_000


class ValidationError(ValueError):
    """Raised when an input violates a type or operation contract."""


def wrap_angle(a: float) -> float:
    """Wrap an angle in radians to (-pi, pi]."""
    w = math.remainder(a, 2.0 * math.pi)
    if w <= -math.pi:
        w += 2.0 * math.pi
    return w


def wrap_angles(a: np.ndarray) -> np.ndarray:
    w = np.remainder(np.asarray(a, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    return np.where(w <= -np.pi, w + 2.0 * np.pi, w)


def seconds_to_us(t: float) -> int:
    return int(round(t * US_PER_S))


def us_to_seconds(t_us: int) -> float:
    return t_us / US_PER_S


def _require_finite(name: str, *values: float) -> None:
    for v in values:
        if not math.isfinite(v):
            raise ValidationError(f"{name} must be finite, got {v!r}")


@dataclass(frozen=True)
class Pose2D:
    """Planar rigid pose; maps points from its local frame into the parent frame."""

    x: float
    y: float
    theta: float

    def __post_init__(self) -> None:
        _require_finite("pose", self.x, self.y, self.theta)
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))

    def compose(self, other: Pose2D) -> Pose2D:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Pose2D(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.theta + other.theta,
        )

    def inverse(self) -> Pose2D:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Pose2D(-c * self.x - s * self.y, s * self.x - c * self.y, -self.theta)

    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, -s], [s, c]])

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (N, 2) array of local points into the parent frame."""
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        return pts @ self.rotation().T + np.array([self.x, self.y])

    def apply_inverse(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        return (pts - np.array([self.x, self.y])) @ self.rotation()

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.theta)


def translation_error(a: Pose2D, b: Pose2D) -> float:
    return math.hypot(a.x - b.x, a.y - b.y)


def heading_error_deg(a: Pose2D, b: Pose2D) -> float:
    return abs(math.degrees(wrap_angle(a.theta - b.theta)))


class ObjectClass(enum.IntEnum):
    CAR = 0
    TRUCK = 1
    PEDESTRIAN = 2
    CYCLIST = 3
    OTHER = 4


@dataclass(frozen=True)
class ObjectState:
    """One oriented-box detection.

    ``center`` is (x, y, z), ``size`` is (length, width, height) and
    ``velocity`` is planar (vx, vy), all in the frame the object was
    reported in.
    """

    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float
    velocity: tuple[float, float]
    class_id: ObjectClass = ObjectClass.CAR
    confidence: float = 1.0
    timestamp: int = 0
    source_id: int = 0
    track_id: int = -1

    def __post_init__(self) -> None:
        center = tuple(float(v) for v in self.center)
        size = tuple(float(v) for v in self.size)
        velocity = tuple(float(v) for v in self.velocity)
        if len(center) != 3 or len(size) != 3 or len(velocity) != 2:
            raise ValidationError("center/size must have 3 entries and velocity 2")
        _require_finite("object", *center, *size, *velocity, self.yaw, self.confidence)
        if min(size) <= 0.0:
            raise ValidationError(f"box dimensions must be positive, got {size}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValidationError(f"confidence must be in [0, 1], got {self.confidence}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "velocity", velocity)
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))
        object.__setattr__(self, "class_id", ObjectClass(self.class_id))
        object.__setattr__(self, "timestamp", int(self.timestamp))
        object.__setattr__(self, "track_id", int(self.track_id))

    @property
    def xy(self) -> np.ndarray:
        return np.array(self.center[:2])

    def with_center(self, x: float, y: float) -> ObjectState:
        return replace(self, center=(x, y, self.center[2]))

    def advanced(self, dt: float) -> ObjectState:
        """Constant-velocity extrapolation by ``dt`` seconds."""
        vx, vy = self.velocity
        return self.with_center(self.center[0] + vx * dt, self.center[1] + vy * dt)

    def footprint(self, valid_time: float = 0.0) -> Footprint:
        return Footprint(
            box_corners(self.center[0], self.center[1], self.size[0], self.size[1], self.yaw),
            valid_time,
        )


def box_corners(cx: float, cy: float, length: float, width: float, yaw: float) -> np.ndarray:
    """Corners of an oriented rectangle, counter-clockwise, as a (4, 2) array."""
    c, s = math.cos(yaw), math.sin(yaw)
    hl, hw = 0.5 * length, 0.5 * width
    local = np.array([[hl, -hw], [hl, hw], [-hl, hw], [-hl, -hw]])
    return local @ np.array([[c, s], [-s, c]]) + np.array([cx, cy])


def polygon_area(corners: np.ndarray) -> float:
    x, y = corners[:, 0], corners[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


@dataclass(frozen=True, eq=False)
class Footprint:
    """BEV quadrilateral of an oriented box at ``valid_time`` seconds."""

    corners: np.ndarray
    valid_time: float = 0.0

    def __post_init__(self) -> None:
        corners = np.asarray(self.corners, dtype=float)
        if corners.shape != (4, 2) or not np.all(np.isfinite(corners)):
            raise ValidationError("footprint needs four finite (x, y) corners")
        area = polygon_area(corners)
        if abs(area) < 1e-12:
            raise ValidationError("degenerate footprint (zero area)")
        if area < 0:
            corners = corners[::-1].copy()
        corners.setflags(write=False)
        object.__setattr__(self, "corners", corners)

    @property
    def centroid(self) -> np.ndarray:
        return self.corners.mean(axis=0)

    def contains(self, p: Sequence[float]) -> bool:
        return bool(points_in_convex(np.asarray(p, dtype=float).reshape(1, 2), self.corners)[0])


def points_in_convex(points: np.ndarray, corners: np.ndarray) -> np.ndarray:
    """Inside test (boundary counts as inside) for a CCW convex polygon."""
    a = corners
    b = np.roll(corners, -1, axis=0)
    edge = b - a
    rel = points[:, None, :] - a[None, :, :]
    cross = edge[None, :, 0] * rel[..., 1] - edge[None, :, 1] * rel[..., 0]
    return np.all(cross >= -1e-12, axis=1)


def points_to_segments_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance matrix (N points x M segments) from points to segments a->b."""
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    ab = b - a
    denom = np.einsum("ij,ij->i", ab, ab)
    denom = np.where(denom > 0, denom, 1.0)
    rel = points[:, None, :] - a[None, :, :]
    t = np.clip(np.einsum("nmj,mj->nm", rel, ab) / denom, 0.0, 1.0)
    closest = a[None, :, :] + t[..., None] * ab[None, :, :]
    return np.linalg.norm(points[:, None, :] - closest, axis=2)


def points_to_polygon_distance(points: np.ndarray, corners: np.ndarray) -> np.ndarray:
    """Unsigned distance from each point to a convex polygon (0 inside)."""
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    d = points_to_segments_distance(points, corners, np.roll(corners, -1, axis=0)).min(axis=1)
    return np.where(points_in_convex(points, corners), 0.0, d)


def points_to_polygon_signed_distance(points: np.ndarray, corners: np.ndarray) -> np.ndarray:
    """Signed distance: positive outside, negative penetration depth inside."""
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    d = points_to_segments_distance(points, corners, np.roll(corners, -1, axis=0)).min(axis=1)
    return np.where(points_in_convex(points, corners), -d, d)


def point_to_footprint_distance(p: Sequence[float], f: Footprint) -> float:
    """Euclidean distance from ``p`` to footprint ``f``; zero when inside."""
    if not isinstance(f, Footprint):
        f = Footprint(np.asarray(f))
    p = np.asarray(p, dtype=float)
    if p.shape != (2,) or not np.all(np.isfinite(p)):
        raise ValidationError("point must be a finite (x, y) pair")
    return float(points_to_polygon_distance(p.reshape(1, 2), f.corners)[0])


def transform_to_world(obj: ObjectState, sensor_pose: Pose2D) -> ObjectState:
    """Rigidly move an object reported in the sensor frame into the world frame."""
    if not isinstance(sensor_pose, Pose2D):
        raise ValidationError("sensor_pose must be a Pose2D")
    c, s = math.cos(sensor_pose.theta), math.sin(sensor_pose.theta)
    x, y, z = obj.center
    vx, vy = obj.velocity
    return replace(
        obj,
        center=(sensor_pose.x + c * x - s * y, sensor_pose.y + s * x + c * y, z),
        yaw=obj.yaw + sensor_pose.theta,
        velocity=(c * vx - s * vy, s * vx + c * vy),
    )


def transform_to_sensor(obj: ObjectState, sensor_pose: Pose2D) -> ObjectState:
    """Inverse of :func:`transform_to_world`."""
    return transform_to_world(obj, sensor_pose.inverse())


@dataclass(frozen=True, eq=False)
class ArcLengthPath:
    """Centerline resampled at uniform arc-length spacing.

    ``normals`` point to the left of the direction of travel, so a positive
    lateral offset moves the point left.
    """

    points: np.ndarray
    headings: np.ndarray
    normals: np.ndarray
    curvature: np.ndarray
    ds: float
    speed_limit: np.ndarray = field(default=None)  # type: ignore[assignment]

    @property
    def s(self) -> np.ndarray:
        return np.arange(len(self.points)) * self.ds

    @property
    def length(self) -> float:
        return (len(self.points) - 1) * self.ds

    @classmethod
    def from_polyline(
        cls,
        polyline: np.ndarray,
        ds: float = 0.5,
        speed_limits: np.ndarray | None = None,
    ) -> ArcLengthPath:
        """Resample a polyline; ``speed_limits`` are per input vertex (piecewise constant forward)."""
        poly = np.asarray(polyline, dtype=float)
        seg = np.linalg.norm(np.diff(poly, axis=0), axis=1)
        keep = np.concatenate([[True], seg > 1e-9])
        poly = poly[keep]
        if speed_limits is not None:
            speed_limits = np.asarray(speed_limits, dtype=float)[keep]
        if len(poly) < 2:
            raise ValidationError("polyline needs at least two distinct vertices")
        cum = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(poly, axis=0), axis=1))])
        n = int(math.floor(cum[-1] / ds + 1e-9)) + 1
        s = np.arange(n) * ds
        pts = np.column_stack([np.interp(s, cum, poly[:, 0]), np.interp(s, cum, poly[:, 1])])
        if speed_limits is None:
            limits = np.full(n, np.inf)
        else:
            idx = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(poly) - 1)
            limits = speed_limits[idx]
        return cls.from_samples(pts, ds, limits)

    @classmethod
    def from_samples(cls, pts: np.ndarray, ds: float, limits: np.ndarray | None = None) -> ArcLengthPath:
        pts = np.asarray(pts, dtype=float)
        d = np.gradient(pts, axis=0)
        headings = np.arctan2(d[:, 1], d[:, 0])
        normals = np.column_stack([-np.sin(headings), np.cos(headings)])
        unwrapped = np.unwrap(headings)
        kappa = np.gradient(unwrapped) / ds
        # 3-sample moving average suppresses vertex spikes
        if len(kappa) >= 3:
            padded = np.concatenate([[kappa[0]], kappa, [kappa[-1]]])
            kappa = (padded[:-2] + padded[1:-1] + padded[2:]) / 3.0
        if limits is None:
            limits = np.full(len(pts), np.inf)
        return cls(pts, headings, normals, kappa, ds, np.asarray(limits, dtype=float))

    def _index(self, s: np.ndarray | float) -> tuple[np.ndarray, np.ndarray]:
        u = np.clip(np.asarray(s, dtype=float) / self.ds, 0.0, len(self.points) - 1)
        i0 = np.minimum(np.floor(u).astype(int), len(self.points) - 2)
        return i0, u - i0

    def position(self, s: np.ndarray | float, offset: np.ndarray | float = 0.0) -> np.ndarray:
        """World point c(s) + n(s) * offset; interpolated between samples."""
        i0, f = self._index(s)
        f = f[..., None]
        c = self.points[i0] * (1 - f) + self.points[i0 + 1] * f
        h = self.heading(s)
        n = np.stack([-np.sin(h), np.cos(h)], axis=-1)
        return c + n * np.asarray(offset, dtype=float)[..., None]

    def heading(self, s: np.ndarray | float) -> np.ndarray:
        i0, f = self._index(s)
        dh = wrap_angles(self.headings[i0 + 1] - self.headings[i0])
        return wrap_angles(self.headings[i0] + f * dh)

    def limit_at(self, s: np.ndarray | float) -> np.ndarray:
        i0, f = self._index(s)
        return np.where(f > 0.5, self.speed_limit[i0 + 1], self.speed_limit[i0])

    def curvature_at(self, s: np.ndarray | float) -> np.ndarray:
        i0, f = self._index(s)
        return self.curvature[i0] * (1 - f) + self.curvature[i0 + 1] * f

    def project(self, p: Sequence[float]) -> tuple[float, float]:
        """Arc length and signed lateral offset of the closest path point."""
        p = np.asarray(p, dtype=float)
        a, b = self.points[:-1], self.points[1:]
        ab = b - a
        denom = np.einsum("ij,ij->i", ab, ab)
        t = np.clip(np.einsum("ij,ij->i", p - a, ab) / np.where(denom > 0, denom, 1.0), 0, 1)
        closest = a + t[:, None] * ab
        d2 = np.einsum("ij,ij->i", p - closest, p - closest)
        i = int(np.argmin(d2))
        s = (i + t[i]) * self.ds
        tangent = ab[i] / math.sqrt(denom[i])
        rel = p - closest[i]
        lateral = float(tangent[0] * rel[1] - tangent[1] * rel[0])
        return float(s), lateral

    def slice(self, s0: float, length: float) -> ArcLengthPath:
        """Sub-path starting at ``s0`` (interpolated) spanning up to ``length`` meters."""
        length = min(length, self.length - s0)
        n = max(int(math.floor(length / self.ds + 1e-9)) + 1, 2)
        s = s0 + np.arange(n) * self.ds
        pts = self.position(np.minimum(s, self.length))
        limits = self.limit_at(np.minimum(s, self.length))
        sub = ArcLengthPath.from_samples(pts, self.ds, limits)
        # keep parent curvature (ends of a short slice would otherwise lose the smoothing window)
        object.__setattr__(sub, "curvature", self.curvature_at(np.minimum(s, self.length)))
        object.__setattr__(sub, "headings", self.heading(np.minimum(s, self.length)))
        h = sub.headings
        object.__setattr__(sub, "normals", np.column_stack([-np.sin(h), np.cos(h)]))
        return sub
