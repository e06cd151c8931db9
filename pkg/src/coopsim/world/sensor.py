"""Raycast LiDAR surrogate and the visibility-oracle detector."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from coopsim.core import (
    Footprint,
    ObjectState,
    Pose2D,
    ValidationError,
    box_corners,
    points_in_convex,
    seconds_to_us,
    transform_to_sensor,
)
from coopsim.world.scenario import BodyState, Scenario

MISS, BOUNDARY, ACTOR = 0, 1, 2


@dataclass(frozen=True)
class SensorConfig:
    n_rays: int = 720
    max_range: float = 80.0
    min_hits: int = 3
    sigma_det: float = 0.1
    sigma_range: float = 0.0
    nms_radius: float = 2.0
    mask_dilation: float = 0.5


@dataclass(frozen=True, eq=False)
class PointScan:
    """One sweep in the sensor frame.

    ``points`` is (n_rays, 2) with NaN rows for misses; ``labels`` holds
    MISS/BOUNDARY/ACTOR and ``body`` indexes ``bodies`` for actor hits
    (-1 otherwise).
    """

    points: np.ndarray
    labels: np.ndarray
    body: np.ndarray
    bodies: tuple[BodyState, ...]
    pose: Pose2D
    t: float
    max_range: float

    @property
    def n_rays(self) -> int:
        return len(self.labels)

    def hits_on(self, body_id: str) -> int:
        idx = [i for i, b in enumerate(self.bodies) if b.id == body_id]
        if not idx:
            return 0
        return int(np.count_nonzero(self.body == idx[0]))

    def boundary_points(self) -> np.ndarray:
        return self.points[self.labels == BOUNDARY]


def _ray_segment_hits(
    origin: np.ndarray, dirs: np.ndarray, a: np.ndarray, b: np.ndarray, max_range: float
) -> np.ndarray:
    """Range along each ray to each segment (inf where no hit); shape (R, M)."""
    if len(a) == 0:
        return np.full((len(dirs), 0), np.inf)
    e = b - a
    w = a - origin
    denom = dirs[:, 0:1] * e[None, :, 1] - dirs[:, 1:2] * e[None, :, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        r = (w[None, :, 0] * e[None, :, 1] - w[None, :, 1] * e[None, :, 0]) / denom
        u = (w[None, :, 0] * dirs[:, 1:2] - w[None, :, 1] * dirs[:, 0:1]) / denom
    ok = (np.abs(denom) > 1e-12) & (r > 1e-9) & (r <= max_range) & (u >= -1e-12) & (u <= 1 + 1e-12)
    return np.where(ok, r, np.inf)


def raycast_scan(
    scenario: Scenario,
    vehicle_pose: Pose2D,
    t: float,
    n_rays: int = 720,
    max_range: float = 80.0,
    *,
    extra_bodies: Sequence[BodyState] = (),
    exclude: Iterable[str] = (),
    sigma_range: float = 0.0,
    rng: np.random.Generator | None = None,
) -> PointScan:
    """Cast ``n_rays`` uniformly spaced rays and keep the nearest return per ray.

    ``extra_bodies`` adds non-scripted vehicles (e.g. the ego) and
    ``exclude`` removes the sensing vehicle's own body.
    """
    if not 0.0 <= t <= scenario.duration + 1e-9:
        raise ValidationError(f"t={t} outside scenario duration {scenario.duration}")
    x0, y0, x1, y1 = scenario.bounding_box(pad=max_range)
    if not (x0 <= vehicle_pose.x <= x1 and y0 <= vehicle_pose.y <= y1):
        raise ValidationError("sensor pose lies outside the map bounding box")
    if n_rays <= 0 or max_range <= 0:
        raise ValidationError("n_rays and max_range must be positive")

    excluded = set(exclude)
    bodies = tuple(b for b in [*scenario.bodies_at(t), *extra_bodies] if b.id not in excluded)
    origin = np.array([vehicle_pose.x, vehicle_pose.y])
    bearings = 2.0 * math.pi * np.arange(n_rays) / n_rays
    world_ang = vehicle_pose.theta + bearings
    dirs = np.column_stack([np.cos(world_ang), np.sin(world_ang)])

    wa, wb = scenario.boundary_segments()
    if bodies:
        corners = np.stack([b.corners() for b in bodies])
        ba = corners.reshape(-1, 2)
        bb = np.roll(corners, -1, axis=1).reshape(-1, 2)
        owner = np.repeat(np.arange(len(bodies)), 4)
    else:
        ba = bb = np.zeros((0, 2))
        owner = np.zeros(0, dtype=int)

    r_wall = _ray_segment_hits(origin, dirs, wa, wb, max_range)
    r_body = _ray_segment_hits(origin, dirs, ba, bb, max_range)
    best_wall = r_wall.min(axis=1) if r_wall.shape[1] else np.full(n_rays, np.inf)
    if r_body.shape[1]:
        j = r_body.argmin(axis=1)
        best_body = r_body[np.arange(n_rays), j]
    else:
        j = np.zeros(n_rays, dtype=int)
        best_body = np.full(n_rays, np.inf)

    rng_ = np.minimum(best_wall, best_body)
    labels = np.full(n_rays, MISS, dtype=np.int8)
    body_idx = np.full(n_rays, -1, dtype=np.int32)
    hit = np.isfinite(rng_)
    is_body = hit & (best_body < best_wall)
    labels[hit & ~is_body] = BOUNDARY
    labels[is_body] = ACTOR
    body_idx[is_body] = owner[j[is_body]]

    if sigma_range > 0.0:
        gen = rng if rng is not None else np.random.default_rng(0)
        noise = gen.normal(0.0, sigma_range, n_rays)
        rng_ = np.where(hit, np.clip(rng_ + noise, 1e-3, max_range), rng_)

    local = np.column_stack([np.cos(bearings), np.sin(bearings)]) * np.where(hit, rng_, np.nan)[:, None]
    return PointScan(local, labels, body_idx, bodies, vehicle_pose, float(t), float(max_range))


def expected_hits(scan: PointScan, body: BodyState) -> float:
    """Rays an unoccluded box would receive given its angular extent."""
    rel = body.corners() - np.array([scan.pose.x, scan.pose.y])
    ang = np.arctan2(rel[:, 1], rel[:, 0])
    centre = math.atan2(body.y - scan.pose.y, body.x - scan.pose.x)
    spread = np.remainder(ang - centre + math.pi, 2 * math.pi) - math.pi
    extent = float(spread.max() - spread.min())
    return max(extent / (2.0 * math.pi / scan.n_rays), 1.0)


def detect_objects(
    scan: PointScan,
    scenario: Scenario | None = None,
    t: float | None = None,
    min_hits: int = 3,
    *,
    sigma_det: float = 0.1,
    rng: np.random.Generator | None = None,
    source_id: int = 0,
) -> list[ObjectState]:
    """Report every body hit by at least ``min_hits`` rays, in the sensor frame.

    Box centers get zero-mean Gaussian noise of ``sigma_det`` per axis;
    velocity comes from the ground-truth script.
    """
    if t is not None and abs(t - scan.t) > 1e-9:
        raise ValidationError("scan was not taken at the requested time")
    gen = rng if rng is not None else np.random.default_rng(0)
    counts = np.bincount(scan.body[scan.body >= 0], minlength=len(scan.bodies))
    out = []
    ts = seconds_to_us(scan.t)
    for idx, body in enumerate(scan.bodies):
        hits = int(counts[idx]) if idx < len(counts) else 0
        if hits < min_hits:
            continue
        noise = gen.normal(0.0, sigma_det, 2) if sigma_det > 0 else np.zeros(2)
        conf = min(max(hits / expected_hits(scan, body), 0.0), 1.0)
        world = ObjectState(
            center=(body.x, body.y, 0.5 * body.size[2]),
            size=body.size,
            yaw=body.yaw,
            velocity=(body.vx, body.vy),
            class_id=body.class_id,
            confidence=conf,
            timestamp=ts,
            source_id=source_id,
            track_id=idx,
        )
        local = transform_to_sensor(world, scan.pose)
        out.append(local.with_center(local.center[0] + noise[0], local.center[1] + noise[1]))
    return out


def nms_distance(detections: Sequence[ObjectState], radius: float = 2.0) -> list[ObjectState]:
    """Distance-based suppression: keep the more confident of any pair closer than ``radius``."""
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].confidence, i))
    kept: list[int] = []
    for i in order:
        p = detections[i].xy
        if all(np.linalg.norm(p - detections[k].xy) >= radius for k in kept):
            kept.append(i)
    return [detections[i] for i in sorted(kept)]


def build_dynamic_mask(detections: Sequence[ObjectState], dilation: float = 0.5) -> list[Footprint]:
    """BEV footprints grown by ``dilation`` on every side."""
    if dilation < 0:
        raise ValidationError("dilation must be non-negative")
    return [
        Footprint(box_corners(d.center[0], d.center[1], d.size[0] + 2 * dilation, d.size[1] + 2 * dilation, d.yaw))
        for d in detections
    ]


def in_mask(points: np.ndarray, mask: Sequence[Footprint]) -> np.ndarray:
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    inside = np.zeros(len(points), dtype=bool)
    for fp in mask:
        inside |= points_in_convex(points, fp.corners)
    return inside

