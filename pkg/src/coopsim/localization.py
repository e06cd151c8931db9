"""Keypoint extraction, geometry map, GNSS prior and scan-to-map refinement."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from coopsim.core import Footprint, Pose2D, ValidationError, wrap_angle
from coopsim.world.sensor import BOUNDARY, PointScan, in_mask

SENSOR, WORLD = "sensor", "world"


class RefinementFailed(RuntimeError):
    """Scan-to-map matching could not run; ``fallback`` is the prior pose."""

    def __init__(self, message: str, fallback: Pose2D) -> None:
        super().__init__(message)
        self.fallback = fallback


@dataclass(frozen=True, eq=False)
class KeypointSet:
    points: np.ndarray
    frame: str = SENSOR
    timestamp: int = 0

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=float).reshape(-1, 2)
        if self.frame not in (SENSOR, WORLD):
            raise ValidationError(f"unknown frame tag {self.frame!r}")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)


def extract_keypoints(
    scan: PointScan,
    mask: Sequence[Footprint] = (),
    min_spacing: float = 0.5,
    cap: int = 512,
) -> KeypointSet:
    """Static boundary hits outside the dynamic mask, thinned greedily in bearing order."""
    pts = scan.points[scan.labels == BOUNDARY]
    if len(pts) and mask:
        pts = pts[~in_mask(pts, mask)]
    if min_spacing > 0:
        grid: dict[tuple[int, int], list[tuple[float, float]]] = {}
        r2 = min_spacing * min_spacing
        kept: list[tuple[float, float]] = []
        for x, y in pts.tolist():
            # neighbouring rays usually clash with the last kept point
            if kept and (x - kept[-1][0]) ** 2 + (y - kept[-1][1]) ** 2 < r2:
                continue
            ci, cj = math.floor(x / min_spacing), math.floor(y / min_spacing)
            clash = False
            for key in ((ci - 1, cj - 1), (ci - 1, cj), (ci - 1, cj + 1), (ci, cj - 1), (ci, cj), (ci, cj + 1), (ci + 1, cj - 1), (ci + 1, cj), (ci + 1, cj + 1)):
                for qx, qy in grid.get(key, ()):
                    if (x - qx) * (x - qx) + (y - qy) * (y - qy) < r2:
                        clash = True
                        break
                if clash:
                    break
            if not clash:
                grid.setdefault((ci, cj), []).append((x, y))
                kept.append((x, y))
        out = np.array(kept, dtype=float).reshape(-1, 2)
    else:
        out = pts.reshape(-1, 2)
    if len(out) > cap:
        out = out[np.linspace(0, len(out) - 1, cap).round().astype(int)]
    return KeypointSet(out, SENSOR, int(round(scan.t * 1e6)))


@dataclass
class _NdtGrid:
    cell: float
    origin: np.ndarray
    index: np.ndarray  # dense (nx, ny) -> cell id or -1
    means: np.ndarray
    covs: np.ndarray


class GeometryMap:
    """World-frame static keypoints bucketed on a uniform grid."""

    def __init__(self, cell: float = 1.0, max_per_cell: int = 8) -> None:
        self.cell = float(cell)
        self.max_per_cell = int(max_per_cell)
        self._cells: dict[tuple[int, int], list[tuple[float, float]]] = {}
        self.occupancy: dict[tuple[int, int], int] = {}
        self._arrays: tuple[np.ndarray, np.ndarray] | None = None
        self._ndt: dict[tuple[float, float], _NdtGrid] = {}

    def __len__(self) -> int:
        return sum(len(v) for v in self._cells.values())

    def cell_of(self, p: Sequence[float]) -> tuple[int, int]:
        return int(math.floor(p[0] / self.cell)), int(math.floor(p[1] / self.cell))

    def insert(self, points: np.ndarray) -> None:
        for p in np.asarray(points, dtype=float).reshape(-1, 2):
            key = self.cell_of(p)
            self.occupancy[key] = self.occupancy.get(key, 0) + 1
            bucket = self._cells.setdefault(key, [])
            if len(bucket) < self.max_per_cell:
                bucket.append((float(p[0]), float(p[1])))
                self._arrays = None
                self._ndt.clear()

    def points(self) -> np.ndarray:
        return self._flat()[0]

    def _flat(self) -> tuple[np.ndarray, np.ndarray]:
        if self._arrays is None:
            keys = sorted(self._cells)
            pts = [p for k in keys for p in self._cells[k]]
            cells = [k for k in keys for _ in self._cells[k]]
            self._arrays = (np.array(pts, dtype=float).reshape(-1, 2), np.array(cells, dtype=int).reshape(-1, 2))
        return self._arrays

    @property
    def extent(self) -> tuple[float, float, float, float]:
        pts = self.points()
        if len(pts) == 0:
            return (0.0, 0.0, 0.0, 0.0)
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        return float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])

    def query(self, xmin: float, ymin: float, xmax: float, ymax: float) -> np.ndarray:
        """All points whose cells intersect the axis-aligned region."""
        pts, cells = self._flat()
        if len(pts) == 0:
            return pts
        i0, j0 = math.floor(xmin / self.cell), math.floor(ymin / self.cell)
        i1, j1 = math.floor(xmax / self.cell), math.floor(ymax / self.cell)
        sel = (cells[:, 0] >= i0) & (cells[:, 0] <= i1) & (cells[:, 1] >= j0) & (cells[:, 1] <= j1)
        return pts[sel]

    def ndt_grid(self, cell: float, min_points: int = 3, reg: float = 1e-3) -> _NdtGrid:
        key = (cell, float(min_points))
        if key in self._ndt:
            return self._ndt[key]
        pts = self.points()
        if len(pts) == 0:
            grid = _NdtGrid(cell, np.zeros(2), -np.ones((1, 1), dtype=int), np.zeros((0, 2)), np.zeros((0, 2, 2)))
            self._ndt[key] = grid
            return grid
        origin = np.floor(pts.min(axis=0) / cell) * cell - cell
        ij = np.floor((pts - origin) / cell).astype(int)
        shape = ij.max(axis=0) + 2
        flat = ij[:, 0] * shape[1] + ij[:, 1]
        order = np.argsort(flat, kind="stable")
        uniq, start, counts = np.unique(flat[order], return_index=True, return_counts=True)
        index = -np.ones(int(shape[0] * shape[1]), dtype=int)
        means, covs = [], []
        for u, st, c in zip(uniq, start, counts):
            if c < min_points:
                continue
            cp = pts[order[st : st + c]]
            mu = cp.mean(axis=0)
            d = cp - mu
            cov = d.T @ d / (c - 1) + reg * np.eye(2)
            index[u] = len(means)
            means.append(mu)
            covs.append(cov)
        grid = _NdtGrid(
            cell,
            origin,
            index.reshape(int(shape[0]), int(shape[1])),
            np.array(means).reshape(-1, 2),
            np.array(covs).reshape(-1, 2, 2),
        )
        self._ndt[key] = grid
        return grid

    def dump(self, path: str | Path) -> None:
        """Write one ``x y`` pair per line (meters)."""
        with open(path, "w", encoding="utf-8") as fh:
            for x, y in self.points().tolist():
                fh.write(f"{x!r} {y!r}\n")

    @classmethod
    def load(cls, path: str | Path, cell: float = 1.0, max_per_cell: int = 8) -> GeometryMap:
        gmap = cls(cell, max_per_cell)
        rows = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                parts = line.split()
                if len(parts) != 2:
                    raise ValidationError(f"{path}:{lineno}: expected 'x y'")
                try:
                    rows.append((float(parts[0]), float(parts[1])))
                except ValueError:
                    raise ValidationError(f"{path}:{lineno}: non-numeric coordinate") from None
        gmap.insert(np.array(rows).reshape(-1, 2))
        return gmap


def accumulate_map(gmap: GeometryMap, kp: KeypointSet, true_pose: Pose2D) -> GeometryMap:
    """Insert sensor-frame keypoints into the world map using ``true_pose``."""
    if kp.frame != SENSOR:
        raise ValidationError(f"accumulate_map expects sensor-frame keypoints, got {kp.frame!r}")
    if len(kp):
        gmap.insert(true_pose.apply(kp.points))
    return gmap


@dataclass(frozen=True)
class NoisyPrior:
    pose: Pose2D
    alpha: int
    sigma_xy: float = 1.0
    sigma_theta: float = 2.0  # degrees


def inject_gnss_noise(
    true_pose: Pose2D,
    alpha: int,
    sigma_xy: float = 1.0,
    sigma_theta: float = 2.0,
    rng_seed: int | Sequence[int] | np.random.Generator = 0,
) -> NoisyPrior:
    """Perturb a pose with N(0, (alpha*sigma)^2) noise on x, y and heading (degrees)."""
    if alpha not in (1, 2, 3, 4) or isinstance(alpha, bool):
        raise ValidationError(f"alpha must be one of 1..4, got {alpha!r}")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    dx, dy = rng.normal(0.0, alpha * sigma_xy, 2)
    dth = math.radians(rng.normal(0.0, alpha * sigma_theta))
    pose = Pose2D(true_pose.x + dx, true_pose.y + dy, true_pose.theta + dth)
    return NoisyPrior(pose, int(alpha), float(sigma_xy), float(sigma_theta))


@dataclass(frozen=True)
class RefineParams:
    max_iter: int = 50
    tol_xy: float = 1e-4
    tol_theta: float = 1e-5
    gate: float | None = None  # max correspondence distance; None -> 2*alpha*sigma_xy
    min_points: int = 10
    min_correspondences: int = 10
    ndt_cell: float = 1.0
    ndt_coarse_cell: float = 2.0
    ndt_min_points: int = 3
    ndt_reg: float = 1e-3
    strict_gate: float = 0.5
    # the relaxed stage only has to land inside the strict gate
    coarse_tol_xy: float = 5e-3
    coarse_tol_theta: float = 5e-4
    coarse_iter_per_blur: int = 12
    good_fit: float = 0.9  # inlier fraction that ends the restart search
    min_fit: float = 0.75  # below this no hypothesis explains the scan: fail to the prior

    def gate_for(self, prior: NoisyPrior) -> float:
        return self.gate if self.gate is not None else 2.0 * prior.alpha * prior.sigma_xy


@dataclass(frozen=True)
class RefineResult:
    pose: Pose2D
    failed: bool = False
    degraded: bool = False
    stage1: Pose2D | None = None
    correspondences: int = 0
    iterations: int = 0


def _window(prior: NoisyPrior) -> float:
    return 3.0 * prior.alpha * prior.sigma_xy


def _local_map(kp: KeypointSet, gmap: GeometryMap, prior: NoisyPrior, params: RefineParams) -> np.ndarray:
    if kp.frame != SENSOR:
        raise ValidationError("refinement expects sensor-frame keypoints")
    if len(kp) < params.min_points:
        raise RefinementFailed(f"only {len(kp)} keypoints (< {params.min_points})", prior.pose)
    world = prior.pose.apply(kp.points)
    pad = _window(prior) + params.gate_for(prior)
    lo, hi = world.min(axis=0) - pad, world.max(axis=0) + pad
    local = gmap.query(lo[0], lo[1], hi[0], hi[1])
    if len(local) == 0:
        raise RefinementFailed("empty map region around the prior", prior.pose)
    return local


def _clamp_to_window(pose: Pose2D, prior: NoisyPrior) -> Pose2D:
    w = _window(prior)
    dx, dy = pose.x - prior.pose.x, pose.y - prior.pose.y
    d = math.hypot(dx, dy)
    if d <= w:
        return pose
    return Pose2D(prior.pose.x + dx * w / d, prior.pose.y + dy * w / d, pose.theta)


def _kabsch_2d(src: np.ndarray, dst: np.ndarray) -> tuple[float, np.ndarray]:
    """Rotation angle and translation minimising ||R src + t - dst||."""
    ms, md = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - ms, dst - md
    sxx = float(np.sum(a[:, 0] * b[:, 0] + a[:, 1] * b[:, 1]))
    sxy = float(np.sum(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]))
    th = math.atan2(sxy, sxx)
    c, s = math.cos(th), math.sin(th)
    t = md - np.array([c * ms[0] - s * ms[1], s * ms[0] + c * ms[1]])
    return th, t


def _icp(kp: KeypointSet, gmap: GeometryMap, prior: NoisyPrior, params: RefineParams, start: Pose2D, gate: float) -> RefineResult:
    local = _local_map(kp, gmap, prior, params)
    tree = cKDTree(local)
    pose = start
    n_corr = 0
    it = 0
    for it in range(1, params.max_iter + 1):
        world = pose.apply(kp.points)
        dist, idx = tree.query(world, distance_upper_bound=gate)
        ok = np.isfinite(dist)
        n_corr = int(ok.sum())
        if n_corr < params.min_correspondences:
            raise RefinementFailed(f"{n_corr} correspondences within {gate:.2f} m", prior.pose)
        th, t = _kabsch_2d(kp.points[ok], local[idx[ok]])
        new = _clamp_to_window(Pose2D(float(t[0]), float(t[1]), th), prior)
        step_xy = math.hypot(new.x - pose.x, new.y - pose.y)
        step_th = abs(wrap_angle(new.theta - pose.theta))
        pose = new
        if step_xy < params.tol_xy and step_th < params.tol_theta:
            break
    return RefineResult(pose, correspondences=n_corr, iterations=it)


def refine_pose_icp(kp: KeypointSet, gmap: GeometryMap, prior: NoisyPrior, params: RefineParams = RefineParams()) -> Pose2D:
    """Point-to-point ICP from the prior, gated at ``params.gate``."""
    return _icp(kp, gmap, prior, params, prior.pose, params.gate_for(prior)).pose


def _gather_pairs(pts: np.ndarray, means: np.ndarray, icov: np.ndarray, cid: np.ndarray) -> tuple[np.ndarray, ...]:
    """Per-pair arrays (px, py, mean x, mean y, a, b, d) for the points with ``cid >= 0``."""
    sel = np.nonzero(cid >= 0)[0]
    k = cid[sel]
    return pts[sel, 0], pts[sel, 1], means[k, 0], means[k, 1], icov[k, 0, 0], icov[k, 0, 1], icov[k, 1, 1]


def _gathered_terms(pairs: tuple[np.ndarray, ...], pose: Pose2D, need_derivs: bool = True):
    px, py, mx, my, a, b, d = pairs
    g = np.zeros(3)
    h = np.zeros((3, 3))
    if len(px) == 0:
        return 0.0, g, h
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    rx, ry = c * px - s * py, s * px + c * py
    qx, qy = rx + (pose.x - mx), ry + (pose.y - my)
    cqx, cqy = a * qx + b * qy, b * qx + d * qy
    e = np.exp(-0.5 * (qx * cqx + qy * cqy))
    score = float(e.sum())
    if not need_derivs:
        return score, g, h
    jx, jy = -ry, rx  # d(world)/d(theta)
    gth = cqx * jx + cqy * jy
    g[:] = [np.dot(e, cqx), np.dot(e, cqy), np.dot(e, gth)]
    cjx, cjy = a * jx + b * jy, b * jx + d * jy
    h[0, 0] = np.dot(e, a - cqx * cqx)
    h[0, 1] = h[1, 0] = np.dot(e, b - cqx * cqy)
    h[1, 1] = np.dot(e, d - cqy * cqy)
    h[0, 2] = h[2, 0] = np.dot(e, cjx - cqx * gth)
    h[1, 2] = h[2, 1] = np.dot(e, cjy - cqy * gth)
    h[2, 2] = np.dot(e, jx * cjx + jy * cjy - cqx * rx - cqy * ry - gth * gth)
    return score, g, h


def _pair_terms(pts: np.ndarray, pose: Pose2D, means: np.ndarray, icov: np.ndarray, cid: np.ndarray, need_derivs: bool = True):
    """Score, gradient and Hessian of the negated Gaussian likelihood for (point, cell) pairs.

    ``cid[i]`` is the cell paired with point ``i`` (-1 for none).
    """
    return _gathered_terms(_gather_pairs(pts, means, icov, cid), pose, need_derivs)


def _ndt_terms(pts: np.ndarray, pose: Pose2D, grid: _NdtGrid, icov: np.ndarray, active: np.ndarray, need_derivs: bool = True):
    """Standard NDT objective: every point scored against the four cells around it."""
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    wx = c * pts[:, 0] - s * pts[:, 1] + pose.x
    wy = s * pts[:, 0] + c * pts[:, 1] + pose.y
    nx, ny = grid.index.shape
    i0 = np.floor((wx - grid.origin[0]) / grid.cell - 0.5).astype(int)
    j0 = np.floor((wy - grid.origin[1]) / grid.cell - 0.5).astype(int)
    # the four neighbour cells of every point, stacked into one pair list
    ii = np.concatenate([i0, i0, i0 + 1, i0 + 1])
    jj = np.concatenate([j0, j0 + 1, j0, j0 + 1])
    ok = (ii >= 0) & (ii < nx) & (jj >= 0) & (jj < ny) & np.tile(active, 4)
    cid = np.full(len(ii), -1)
    cid[ok] = grid.index[ii[ok], jj[ok]]
    return _pair_terms(np.tile(pts, (4, 1)), pose, grid.means, icov, cid, need_derivs)


def _newton_step(g: np.ndarray, h: np.ndarray, cell: float) -> np.ndarray:
    """Newton step with the Hessian clamped positive definite and a trust-region cap."""
    w, v = np.linalg.eigh(h)
    floor = max(1e-9, 1e-6 * float(np.abs(w).max(initial=0.0)))
    step = -(v / np.maximum(np.abs(w), floor)) @ (v.T @ g)
    # at most a quarter cell / ~3 degrees per iteration
    scale = max(math.hypot(step[0], step[1]) / (0.25 * cell), abs(step[2]) / 0.05, 1.0)
    return step / scale


def _ndt(
    kp: KeypointSet,
    gmap: GeometryMap,
    prior: NoisyPrior,
    params: RefineParams,
    start: Pose2D,
    gate: float,
) -> RefineResult:
    local = _local_map(kp, gmap, prior, params)
    grid = gmap.ndt_grid(params.ndt_cell, params.ndt_min_points, params.ndt_reg)
    if len(grid.means) == 0:
        raise RefinementFailed("no NDT cell has enough map points", prior.pose)
    icov = np.linalg.inv(grid.covs)
    tree = cKDTree(local)
    pts = kp.points
    pose = start
    n_corr = 0
    it = 0
    for it in range(1, params.max_iter + 1):
        dist, _ = tree.query(pose.apply(pts), distance_upper_bound=gate)
        active = np.isfinite(dist)
        n_corr = int(active.sum())
        if n_corr < params.min_correspondences:
            raise RefinementFailed(f"{n_corr} correspondences within {gate:.2f} m", prior.pose)
        score, g, h = _ndt_terms(pts, pose, grid, icov, active)
        step = _newton_step(g, h, grid.cell)
        # backtracking keeps the likelihood non-decreasing
        t = 1.0
        accepted = pose
        for _ in range(10):
            cand = _clamp_to_window(Pose2D(pose.x + t * step[0], pose.y + t * step[1], pose.theta + t * step[2]), prior)
            if _ndt_terms(pts, cand, grid, icov, active, need_derivs=False)[0] >= score:
                accepted = cand
                break
            t *= 0.5
        step_xy = math.hypot(accepted.x - pose.x, accepted.y - pose.y)
        step_th = abs(wrap_angle(accepted.theta - pose.theta))
        pose = accepted
        if step_xy < params.tol_xy and step_th < params.tol_theta:
            break
    return RefineResult(pose, correspondences=n_corr, iterations=it)


def refine_pose_ndt(kp: KeypointSet, gmap: GeometryMap, prior: NoisyPrior, params: RefineParams = RefineParams()) -> Pose2D:
    """2D NDT: Newton ascent on summed per-point cell likelihoods.

    Run on its own the matcher uses the coarse cell size, whose wider
    basin tolerates meter-level prior errors; the fine ``ndt_cell`` is
    reserved for the strict stage of :func:`coarse_to_fine_refine`.
    """
    single = replace(params, ndt_cell=params.ndt_coarse_cell)
    return _ndt(kp, gmap, prior, single, prior.pose, params.gate_for(prior)).pose


_METHODS = {"icp": _icp, "ndt": _ndt}


def _ndt_associated(kp: KeypointSet, gmap: GeometryMap, prior: NoisyPrior, params: RefineParams, start: Pose2D, gate: float) -> RefineResult:
    """Relaxed NDT stage.

    Each keypoint is paired with the cell holding its nearest map point
    (pairs longer than ``gate`` are dropped). Cells are blurred, first by
    ``gate`` so every pair sits in the near-quadratic part of its
    Gaussian, then by halving widths down to a quarter cell; each width
    is iterated to convergence. The wide start avoids locking onto
    one-cell aliases along straight walls.
    """
    local = _local_map(kp, gmap, prior, params)
    grid = gmap.ndt_grid(params.ndt_coarse_cell, params.ndt_min_points, params.ndt_reg)
    if len(grid.means) == 0:
        raise RefinementFailed("no NDT cell has enough map points", prior.pose)
    ij = np.floor((local - grid.origin) / grid.cell).astype(int)
    cell_of_local = grid.index[ij[:, 0], ij[:, 1]]
    tree = cKDTree(local)
    pts = kp.points
    blurs = [max(gate, 0.25 * grid.cell)]
    while blurs[-1] > 0.25 * grid.cell * 1.001:
        blurs.append(max(blurs[-1] * 0.5, 0.25 * grid.cell))
    pose = start
    n_corr = 0
    total = 0
    for blur in blurs:
        icov = np.linalg.inv(grid.covs + blur**2 * np.eye(2))
        for _ in range(min(params.max_iter, params.coarse_iter_per_blur)):
            total += 1
            dist, idx = tree.query(pose.apply(pts), distance_upper_bound=gate)
            ok = np.isfinite(dist)
            cid = np.full(len(pts), -1)
            cid[ok] = cell_of_local[idx[ok]]
            n_corr = int(np.count_nonzero(cid >= 0))
            if n_corr < params.min_correspondences:
                raise RefinementFailed(f"{n_corr} correspondences within {gate:.2f} m", prior.pose)
            pairs = _gather_pairs(pts, grid.means, icov, cid)
            score, g, h = _gathered_terms(pairs, pose)
            step = _newton_step(g, h, grid.cell)
            t = 1.0
            accepted = pose
            for _ in range(10):
                cand = _clamp_to_window(Pose2D(pose.x + t * step[0], pose.y + t * step[1], pose.theta + t * step[2]), prior)
                if _gathered_terms(pairs, cand, need_derivs=False)[0] >= score:
                    accepted = cand
                    break
                t *= 0.5
            step_xy = math.hypot(accepted.x - pose.x, accepted.y - pose.y)
            step_th = abs(wrap_angle(accepted.theta - pose.theta))
            pose = accepted
            if step_xy < params.coarse_tol_xy and step_th < params.coarse_tol_theta:
                break
    return RefineResult(pose, correspondences=n_corr, iterations=total)


def coarse_to_fine_refine(
    kp: KeypointSet,
    gmap: GeometryMap,
    prior: NoisyPrior,
    method: str = "ndt",
    params: RefineParams = RefineParams(),
) -> RefineResult:
    """Relaxed alignment (gate 2*alpha*sigma_xy) then a strict pass (gate 0.5 m).

    Stage-1 failure returns the prior flagged ``failed``; stage-2 failure
    returns the stage-1 pose flagged ``degraded``. If the result from the
    prior explains fewer than ``good_fit`` of the keypoints, the pair of
    stages is restarted from grid seeds inside the search window and the
    best-fitting result is kept; below ``min_fit`` the prior is returned
    flagged ``failed``.
    """
    try:
        solver = _METHODS[method]
    except KeyError:
        raise ValidationError(f"unknown refinement method {method!r}") from None
    relaxed = 2.0 * prior.alpha * prior.sigma_xy
    coarse = _ndt_associated if method == "ndt" else solver
    best: RefineResult | None = None
    best_fit = -1.0
    for start in _seeds(prior, relaxed):
        result = _two_stage(coarse, solver, kp, gmap, prior, params, start, relaxed)
        if result.failed:
            if best is None:
                best = result
            continue
        fit = _fitness(kp, gmap, result.pose, params.strict_gate)
        if fit > best_fit:
            best, best_fit = result, fit
        if best_fit >= params.good_fit:
            break
    assert best is not None
    if not best.failed and best_fit < params.min_fit:
        return RefineResult(prior.pose, failed=True, stage1=best.stage1)
    return best


def _two_stage(coarse, fine, kp, gmap, prior, params, start, relaxed) -> RefineResult:
    try:
        first = coarse(kp, gmap, prior, params, start, relaxed)
    except RefinementFailed as exc:
        return RefineResult(exc.fallback, failed=True)
    try:
        second = fine(kp, gmap, prior, params, first.pose, params.strict_gate)
    except RefinementFailed:
        return RefineResult(first.pose, degraded=True, stage1=first.pose, correspondences=first.correspondences)
    return RefineResult(second.pose, stage1=first.pose, correspondences=second.correspondences, iterations=first.iterations + second.iterations)


def _seeds(prior: NoisyPrior, spacing: float):
    """The prior, then grid offsets inside the search window, nearest first."""
    yield prior.pose
    w = _window(prior)
    n = int(w // spacing)
    offs = [(i * spacing, j * spacing) for i in range(-n, n + 1) for j in range(-n, n + 1) if 0 < math.hypot(i, j) * spacing <= w]
    offs.sort(key=lambda o: (math.hypot(*o), o))
    for dx, dy in offs:
        yield Pose2D(prior.pose.x + dx, prior.pose.y + dy, prior.pose.theta)


def _fitness(kp: KeypointSet, gmap: GeometryMap, pose: Pose2D, radius: float) -> float:
    """Fraction of keypoints with a map point within ``radius`` at ``pose``."""
    world = pose.apply(kp.points)
    lo, hi = world.min(axis=0) - radius, world.max(axis=0) + radius
    local = gmap.query(lo[0], lo[1], hi[0], hi[1])
    if len(local) == 0:
        return 0.0
    dist, _ = cKDTree(local).query(world, distance_upper_bound=radius)
    return float(np.mean(np.isfinite(dist)))


@dataclass
class LocalizationStats:
    """Per-level error accumulator used by the benchmark and the runner."""

    translation: dict[str, list[float]] = field(default_factory=dict)
    heading: dict[str, list[float]] = field(default_factory=dict)

    def add(self, key: str, est: Pose2D, truth: Pose2D) -> None:
        self.translation.setdefault(key, []).append(math.hypot(est.x - truth.x, est.y - truth.y))
        self.heading.setdefault(key, []).append(abs(math.degrees(wrap_angle(est.theta - truth.theta))))

    def mean(self, key: str) -> tuple[float, float]:
        return float(np.mean(self.translation[key])), float(np.mean(self.heading[key]))
