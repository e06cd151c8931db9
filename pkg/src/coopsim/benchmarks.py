"""Localization benchmark under injected GNSS noise (scaled-down Table-style report)."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from coopsim.core import Pose2D
from coopsim.localization import (
    GeometryMap,
    LocalizationStats,
    RefineParams,
    accumulate_map,
    coarse_to_fine_refine,
    extract_keypoints,
    inject_gnss_noise,
)
from coopsim.world.scenario import EgoSpec, Lane, Scenario
from coopsim.world.sensor import raycast_scan


def _box(cx: float, cy: float, w: float, h: float, rot: float = 0.0) -> np.ndarray:
    c, s = math.cos(rot), math.sin(rot)
    local = np.array([[-w, -h], [w, -h], [w, h], [-w, h], [-w, -h]]) * 0.5
    return local @ np.array([[c, s], [-s, c]]) + np.array([cx, cy])


def feature_rich_scene() -> Scenario:
    """Walled yard with pillars, L-walls and slanted segments; no actors."""
    walls = [
        np.array([[-30.0, -20.0], [30.0, -20.0], [30.0, 20.0], [-30.0, 20.0], [-30.0, -20.0]]),
        _box(-18.0, -8.0, 2.0, 2.0),
        _box(-5.0, 10.0, 3.0, 1.5, 0.4),
        _box(12.0, -10.0, 1.0, 4.0),
        _box(20.0, 8.0, 2.5, 2.5, 0.8),
        _box(-20.0, 12.0, 1.2, 1.2),
        _box(4.0, -4.0, 1.0, 1.0),
        np.array([[-12.0, 2.0], [-12.0, -4.0], [-6.0, -4.0]]),
        np.array([[8.0, 14.0], [16.0, 14.0], [16.0, 10.0]]),
        np.array([[-26.0, -16.0], [-20.0, -12.0]]),
        np.array([[22.0, -16.0], [27.0, -10.0]]),
        np.array([[0.0, 16.0], [3.0, 12.0]]),
    ]
    lane = Lane("yard", np.array([[-25.0, 0.0], [25.0, 0.0]]), 10.0)
    return Scenario(
        name="feature_rich_yard",
        lanes={"yard": lane},
        stoplines=(),
        boundaries=tuple(walls),
        actors=(),
        ego=EgoSpec(1, ("yard",), 0.0, 0.0),
        senders=(),
        duration=1.0,
        tick=0.1,
    )


TRIAL_REGION = ((-24.0, 24.0), (-14.0, 14.0))
N_RAYS = 720
MAX_RANGE = 60.0
SIGMA_RANGE = 0.02


def _free(scene: Scenario, x: float, y: float, clearance: float = 1.5) -> bool:
    from coopsim.core import points_to_segments_distance

    a, b = scene.boundary_segments()
    return float(points_to_segments_distance(np.array([[x, y]]), a, b).min()) > clearance


def build_survey_map(scene: Scenario, seed: int = 0, n_poses: int = 40) -> GeometryMap:
    """Accumulate keypoints from survey scans taken at known poses."""
    rng = np.random.default_rng([seed, 7])
    gmap = GeometryMap()
    placed = 0
    while placed < n_poses:
        x = rng.uniform(*TRIAL_REGION[0])
        y = rng.uniform(*TRIAL_REGION[1])
        if not _free(scene, x, y):
            continue
        pose = Pose2D(x, y, rng.uniform(-math.pi, math.pi))
        scan = raycast_scan(scene, pose, 0.0, N_RAYS, MAX_RANGE, sigma_range=SIGMA_RANGE, rng=rng)
        accumulate_map(gmap, extract_keypoints(scan, (), 0.25), pose)
        placed += 1
    return gmap


@dataclass
class LocalizationReport:
    alphas: tuple[int, ...]
    trials: int
    stats: LocalizationStats
    failures: dict[str, int]
    seconds: float

    def row(self, alpha: int) -> dict[str, float]:
        out: dict[str, float] = {"alpha": alpha}
        for m in ("gnss", "icp", "ndt"):
            t, h = self.stats.mean(f"{m}/{alpha}")
            out[f"{m}_trans_m"] = t
            out[f"{m}_head_deg"] = h
        return out

    def table(self) -> str:
        head = "level | GNSS  ICP   NDT  (m) | GNSS  ICP   NDT  (deg)"
        lines = [head, "-" * len(head)]
        for a in self.alphas:
            r = self.row(a)
            lines.append(
                f"{a:5d} | {r['gnss_trans_m']:.3f}  {r['icp_trans_m']:.3f}  {r['ndt_trans_m']:.3f}"
                f" | {r['gnss_head_deg']:.3f}  {r['icp_head_deg']:.3f}  {r['ndt_head_deg']:.3f}"
            )
        return "\n".join(lines)


def run_localization_benchmark(
    alphas: tuple[int, ...] = (1, 2, 3, 4),
    trials: int = 200,
    seed: int = 0,
    params: RefineParams = RefineParams(),
) -> LocalizationReport:
    scene = feature_rich_scene()
    gmap = build_survey_map(scene, seed)
    stats = LocalizationStats()
    failures: dict[str, int] = {}
    t0 = time.perf_counter()
    rng = np.random.default_rng([seed, 11])
    poses = []
    while len(poses) < trials:
        x, y = rng.uniform(*TRIAL_REGION[0]), rng.uniform(*TRIAL_REGION[1])
        if _free(scene, x, y):
            poses.append(Pose2D(x, y, rng.uniform(-math.pi, math.pi)))
    kps = []
    for i, pose in enumerate(poses):
        scan = raycast_scan(scene, pose, 0.0, N_RAYS, MAX_RANGE, sigma_range=SIGMA_RANGE, rng=np.random.default_rng([seed, 13, i]))
        kps.append(extract_keypoints(scan))
    for alpha in alphas:
        for i, (pose, kp) in enumerate(zip(poses, kps)):
            prior = inject_gnss_noise(pose, alpha, rng_seed=[seed, 17, alpha, i])
            stats.add(f"gnss/{alpha}", prior.pose, pose)
            for method in ("icp", "ndt"):
                res = coarse_to_fine_refine(kp, gmap, prior, method, params)
                if res.failed:
                    failures[f"{method}/{alpha}"] = failures.get(f"{method}/{alpha}", 0) + 1
                stats.add(f"{method}/{alpha}", res.pose, pose)
    return LocalizationReport(tuple(alphas), trials, stats, failures, time.perf_counter() - t0)
