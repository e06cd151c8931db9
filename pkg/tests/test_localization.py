from __future__ import annotations

import math
from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coopsim.benchmarks import MAX_RANGE, N_RAYS, SIGMA_RANGE, build_survey_map, feature_rich_scene
from coopsim.core import ObjectState, Pose2D, ValidationError, heading_error_deg, points_to_segments_distance, translation_error
from coopsim.localization import (
    SENSOR,
    WORLD,
    GeometryMap,
    KeypointSet,
    NoisyPrior,
    RefinementFailed,
    RefineParams,
    accumulate_map,
    coarse_to_fine_refine,
    extract_keypoints,
    inject_gnss_noise,
    refine_pose_icp,
    refine_pose_ndt,
)
from coopsim.world.scenario import BodyState
from coopsim.world.sensor import ACTOR, BOUNDARY, PointScan, build_dynamic_mask, in_mask, raycast_scan
from conftest import make_scenario, rect


@lru_cache(maxsize=None)
def yard():
    scene = feature_rich_scene()
    return scene, build_survey_map(scene, seed=0)


def scan_kp(scene, pose, seed=1, **kw):
    scan = raycast_scan(scene, pose, 0.0, N_RAYS, MAX_RANGE, sigma_range=SIGMA_RANGE, rng=np.random.default_rng(seed), **kw)
    return scan, extract_keypoints(scan)


def offset_prior(truth: Pose2D, dx: float, dy: float, dth_deg: float, alpha: int = 1) -> NoisyPrior:
    return NoisyPrior(Pose2D(truth.x + dx, truth.y + dy, truth.theta + math.radians(dth_deg)), alpha)


# -- keypoints ---------------------------------------------------------------------------


def _fake_scan(points, labels):
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    return PointScan(pts, np.asarray(labels, dtype=np.int8), np.full(len(pts), -1), (), Pose2D(0, 0, 0), 0.0, 80.0)


def test_actor_only_scan_gives_no_keypoints():
    kp = extract_keypoints(_fake_scan([[1, 0], [2, 0], [3, 0]], [ACTOR] * 3))
    assert len(kp) == 0 and kp.frame == SENSOR


def test_close_hits_are_thinned():
    kp = extract_keypoints(_fake_scan([[5.0, 0.0], [5.0, 0.1]], [BOUNDARY] * 2), min_spacing=0.5)
    assert len(kp) == 1


def test_room_keypoints_lie_on_walls(room):
    pose = Pose2D(0.5, 0.5, 0.2)
    scan = raycast_scan(room, pose, 0.0, n_rays=720, max_range=50)
    kp = extract_keypoints(scan)
    a, b = room.boundary_segments()
    assert np.all(points_to_segments_distance(pose.apply(kp.points), a, b).min(axis=1) < 0.1)


def test_keypoint_spacing_mask_and_cap():
    scene, _ = yard()
    scan = raycast_scan(scene, Pose2D(0.0, 0.0, 0.0), 0.0, 720, 60.0)
    mask = build_dynamic_mask([ObjectState((8.0, 0.0, 0.5), (4.0, 2.0, 1.5), 0.0, (0, 0))], 0.5)
    kp = extract_keypoints(scan, mask, min_spacing=0.5, cap=40)
    assert len(kp) <= 40
    assert not np.any(in_mask(kp.points, mask))
    full = extract_keypoints(scan, mask, min_spacing=0.5)
    d = np.linalg.norm(full.points[:, None] - full.points[None], axis=2)
    np.fill_diagonal(d, np.inf)
    assert d.min() >= 0.5


# -- geometry map ------------------------------------------------------------------------


def test_accumulate_empty_and_identity():
    gmap = GeometryMap()
    accumulate_map(gmap, KeypointSet(np.zeros((0, 2))), Pose2D(0, 0, 0))
    assert len(gmap) == 0
    accumulate_map(gmap, KeypointSet(np.array([[1.0, 0.0]])), Pose2D(0, 0, 0))
    assert gmap.points().tolist() == [[1.0, 0.0]]


def test_accumulate_rejects_world_frame():
    with pytest.raises(ValidationError):
        accumulate_map(GeometryMap(), KeypointSet(np.array([[1.0, 0.0]]), WORLD), Pose2D(0, 0, 0))


def test_room_survey_covers_every_wall(room):
    gmap = GeometryMap()
    for k in range(10):
        a = 2 * math.pi * k / 10
        pose = Pose2D(4 * math.cos(a), 4 * math.sin(a), a)
        accumulate_map(gmap, extract_keypoints(raycast_scan(room, pose, 0.0, 720, 50)), pose)
    pts = gmap.points()
    for axis, val in ((0, -10), (0, 10), (1, -10), (1, 10)):
        on = pts[np.abs(pts[:, axis] - val) < 0.1][:, 1 - axis]
        bins = np.floor(on).astype(int)
        assert set(range(-10, 10)) <= set(bins.tolist())


def test_per_cell_cap_and_cell_bounds():
    gmap = GeometryMap(cell=1.0, max_per_cell=8)
    gmap.insert(np.random.default_rng(0).uniform(0.0, 0.999, (50, 2)))
    assert len(gmap) == 8
    assert gmap.occupancy[(0, 0)] == 50
    for p in gmap.points():
        assert gmap.cell_of(p) == (0, 0)


@settings(max_examples=40)
@given(st.floats(-20, 20), st.floats(-20, 20), st.floats(0.1, 15), st.floats(0.1, 15))
def test_query_returns_points_of_intersecting_cells(x0, y0, w, h):
    rng = np.random.default_rng(1)
    gmap = GeometryMap()
    gmap.insert(rng.uniform(-25, 25, (400, 2)))
    got = {tuple(p) for p in gmap.query(x0, y0, x0 + w, y0 + h)}
    i0, i1 = math.floor(x0), math.floor(x0 + w)
    j0, j1 = math.floor(y0), math.floor(y0 + h)
    want = {tuple(p) for p in gmap.points() if i0 <= math.floor(p[0]) <= i1 and j0 <= math.floor(p[1]) <= j1}
    assert got == want


def test_map_dump_load_round_trip(tmp_path):
    gmap = GeometryMap()
    gmap.insert(np.random.default_rng(2).uniform(-5, 5, (60, 2)))
    gmap.dump(tmp_path / "m.txt")
    back = GeometryMap.load(tmp_path / "m.txt")
    assert np.array_equal(back.points(), gmap.points())
    (tmp_path / "bad.txt").write_text("1 2 3\n")
    with pytest.raises(ValidationError):
        GeometryMap.load(tmp_path / "bad.txt")


# -- GNSS prior --------------------------------------------------------------------------


def test_prior_is_deterministic_and_records_parameters():
    truth = Pose2D(1, 2, 0.3)
    a, b = inject_gnss_noise(truth, 1, rng_seed=42), inject_gnss_noise(truth, 1, rng_seed=42)
    assert a == b
    assert (a.alpha, a.sigma_xy, a.sigma_theta) == (1, 1.0, 2.0)


@pytest.mark.parametrize("alpha", [0, 5, 2.5, True])
def test_invalid_alpha(alpha):
    with pytest.raises(ValidationError):
        inject_gnss_noise(Pose2D(0, 0, 0), alpha)


def test_prior_statistics_match_rayleigh_and_half_normal():
    truth = Pose2D(0, 0, 0)
    rng = np.random.default_rng(5)
    t1 = [translation_error(inject_gnss_noise(truth, 1, rng_seed=rng).pose, truth) for _ in range(10_000)]
    h4 = [heading_error_deg(inject_gnss_noise(truth, 4, rng_seed=rng).pose, truth) for _ in range(10_000)]
    assert np.mean(t1) == pytest.approx(math.sqrt(math.pi / 2), rel=0.03)
    assert np.mean(h4) == pytest.approx(8.0 * math.sqrt(2 / math.pi), rel=0.03)


# -- refinement --------------------------------------------------------------------------

TRUTH = Pose2D(2.0, -3.0, 0.6)


def _self_mapped():
    gmap = GeometryMap()
    kp = extract_keypoints(raycast_scan(feature_rich_scene(), TRUTH, 0.0, N_RAYS, MAX_RANGE))
    accumulate_map(gmap, kp, TRUTH)
    return kp, gmap


NDT_CELL_BIAS = pytest.mark.xfail(
    strict=True,
    reason="the summed cell-likelihood score peaks where the cell Gaussians, not the raw points, agree; see the NDT bias test",
)


@pytest.mark.parametrize("refine", [refine_pose_icp, pytest.param(refine_pose_ndt, marks=NDT_CELL_BIAS)])
def test_aligned_prior_is_a_fixed_point(refine):
    kp, gmap = _self_mapped()
    est = refine(kp, gmap, NoisyPrior(TRUTH, 1))
    assert translation_error(est, TRUTH) < 1e-6
    assert abs(est.theta - TRUTH.theta) < 1e-6


def test_ndt_bias_on_a_self_built_map_is_small():
    kp, gmap = _self_mapped()
    est = refine_pose_ndt(kp, gmap, NoisyPrior(TRUTH, 1))
    assert translation_error(est, TRUTH) < 1e-3
    assert heading_error_deg(est, TRUTH) < 0.01


@pytest.mark.parametrize("refine", [refine_pose_icp, refine_pose_ndt])
def test_known_offset_is_recovered(refine):
    scene, gmap = yard()
    _, kp = scan_kp(scene, TRUTH)
    est = refine(kp, gmap, offset_prior(TRUTH, 0.8, 0.5, 3.0), RefineParams(gate=2.0))
    assert translation_error(est, TRUTH) < 0.1
    assert heading_error_deg(est, TRUTH) < 0.5


@pytest.mark.parametrize("method", ["icp", "ndt"])
def test_corridor_recovers_lateral_offset(method):
    corridor = make_scenario(boundaries=[[[-100.0, 3.0], [100.0, 3.0]], [[-100.0, -3.0], [100.0, -3.0]]])
    gmap = GeometryMap()
    for x in range(-60, 61, 10):
        pose = Pose2D(float(x), 0.0, 0.0)
        accumulate_map(gmap, extract_keypoints(raycast_scan(corridor, pose, 0.0, 720, 40)), pose)
    truth = Pose2D(0.0, 0.0, 0.0)
    kp = extract_keypoints(raycast_scan(corridor, truth, 0.0, 720, 40))
    res = coarse_to_fine_refine(kp, gmap, offset_prior(truth, 4.0, 0.6, 0.0, alpha=2), method)
    assert abs(res.pose.y - truth.y) < 0.2


def test_too_few_keypoints_fail_with_prior_fallback():
    scene, gmap = yard()
    prior = offset_prior(TRUTH, 0.3, 0.0, 0.0)
    kp = KeypointSet(np.array([[1.0, 0.0], [2.0, 0.0]]))
    for refine in (refine_pose_icp, refine_pose_ndt):
        with pytest.raises(RefinementFailed) as err:
            refine(kp, gmap, prior)
        assert err.value.fallback == prior.pose
    res = coarse_to_fine_refine(kp, gmap, prior)
    assert res.failed and res.pose == prior.pose


def test_empty_map_region_fails():
    scene, _ = yard()
    _, kp = scan_kp(scene, TRUTH)
    with pytest.raises(RefinementFailed):
        refine_pose_icp(kp, GeometryMap(), NoisyPrior(TRUTH, 1))


@pytest.mark.parametrize("method", ["icp", "ndt"])
def test_two_stage_matches_single_stage_near_truth(method):
    scene, gmap = yard()
    _, kp = scan_kp(scene, TRUTH)
    prior = offset_prior(TRUTH, 0.05, -0.05, 0.2)
    single = (refine_pose_icp if method == "icp" else refine_pose_ndt)(kp, gmap, prior, RefineParams(gate=0.5))
    both = coarse_to_fine_refine(kp, gmap, prior, method).pose
    assert translation_error(single, both) < 0.01
    assert heading_error_deg(single, both) < 0.05


def test_stage_two_failure_returns_stage_one_pose_degraded():
    scene, gmap = yard()
    _, kp = scan_kp(scene, TRUTH)
    params = RefineParams(strict_gate=1e-6, good_fit=0.0, min_fit=0.0)
    res = coarse_to_fine_refine(kp, gmap, offset_prior(TRUTH, 0.5, 0.2, 1.0), "ndt", params)
    assert res.degraded and not res.failed
    assert res.pose == res.stage1


def test_unknown_method_rejected():
    scene, gmap = yard()
    _, kp = scan_kp(scene, TRUTH)
    with pytest.raises(ValidationError):
        coarse_to_fine_refine(kp, gmap, NoisyPrior(TRUTH, 1), "gicp")


def _poses(n, seed):
    from coopsim.benchmarks import TRIAL_REGION, _free

    scene, _ = yard()
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        x, y = rng.uniform(*TRIAL_REGION[0]), rng.uniform(*TRIAL_REGION[1])
        if _free(scene, x, y):
            out.append(Pose2D(x, y, rng.uniform(-math.pi, math.pi)))
    return out


def test_two_stage_beats_strict_only_at_alpha_4():
    scene, gmap = yard()
    two, strict = [], []
    for i, pose in enumerate(_poses(200, 31)):
        _, kp = scan_kp(scene, pose, seed=i)
        prior = inject_gnss_noise(pose, 4, rng_seed=[31, i])
        two.append(translation_error(coarse_to_fine_refine(kp, gmap, prior, "ndt").pose, pose))
        try:
            est = refine_pose_ndt(kp, gmap, prior, RefineParams(gate=0.5))
        except RefinementFailed as exc:
            est = exc.fallback
        strict.append(translation_error(est, pose))
    assert np.mean(two) <= np.mean(strict)


def test_refinement_is_idempotent():
    scene, gmap = yard()
    for i, pose in enumerate(_poses(20, 3)):
        _, kp = scan_kp(scene, pose, seed=i)
        prior = inject_gnss_noise(pose, 1, rng_seed=i)
        first = coarse_to_fine_refine(kp, gmap, prior, "ndt").pose
        if translation_error(first, prior.pose) > 3.0 - 1e-6:
            continue  # pinned to the search-window edge; a new window may legitimately move it
        again = coarse_to_fine_refine(kp, gmap, NoisyPrior(first, 1), "ndt").pose
        assert translation_error(first, again) < 0.01
        assert heading_error_deg(first, again) < 0.05


def test_masked_mover_does_not_shift_the_pose():
    scene, gmap = yard()
    pose = Pose2D(-2.0, 4.0, 0.3)
    prior = inject_gnss_noise(pose, 1, rng_seed=8)
    _, kp_clean = scan_kp(scene, pose)
    base = coarse_to_fine_refine(kp_clean, gmap, prior, "ndt").pose
    from coopsim.core import ObjectClass

    mover = BodyState("bus", ObjectClass.TRUCK, (10.0, 2.5, 3.0), pose.x + 7.0, pose.y + 1.0, 0.2, 5.0, 0.0)
    scan, _ = scan_kp(scene, pose, extra_bodies=(mover,))
    det_local = ObjectState((mover.x, mover.y, 1.5), mover.size, mover.yaw, (0, 0))
    from coopsim.core import transform_to_sensor

    mask = build_dynamic_mask([transform_to_sensor(det_local, pose)], 0.5)
    kp = extract_keypoints(scan, mask)
    assert translation_error(coarse_to_fine_refine(kp, gmap, prior, "ndt").pose, base) < 0.05


def test_ndt_beats_icp_at_alpha_3():
    from coopsim.benchmarks import run_localization_benchmark

    rep = run_localization_benchmark(alphas=(3,), trials=200, seed=4)
    assert rep.stats.mean("ndt/3")[0] < rep.stats.mean("icp/3")[0]
