from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest
from cvxopt import matrix, solvers
from hypothesis import given, settings
from hypothesis import strategies as st
from shapely.geometry import Point, Polygon

from coopsim.core import ArcLengthPath, ObjectClass, ObjectState, ValidationError, box_corners
from coopsim.planning.config import PlannerConfig
from coopsim.planning.cost import evaluate_path_cost
from coopsim.planning.envelope import MAP, STOP, VelocityEnvelope, compute_velocity_envelope, envelope_coop_dominance
from coopsim.planning.lateral import HalfSpace, lateral_objective, lateral_qp, linearize_clearance
from coopsim.planning.planner import EgoState, choose_candidate, plan_step
from coopsim.planning.splines import LateralProfile, lateral_candidate, sample_lateral_candidates

solvers.options.update({"show_progress": False, "abstol": 1e-9, "reltol": 1e-9, "feastol": 1e-9})

CFG = PlannerConfig()
STRAIGHT = ArcLengthPath.from_polyline(np.array([[0.0, 0.0], [300.0, 0.0]]), 0.5, np.array([13.9, 13.9]))


def car(x, y, yaw=0.0, v=(0.0, 0.0), cls=ObjectClass.CAR, size=(4.5, 1.9, 1.5)):
    return ObjectState((x, y, 0.75), size, yaw, v, cls)


# -- splines -----------------------------------------------------------------------------


def test_zero_shift_from_centre_is_identically_zero():
    prof = lateral_candidate(0.0, 0.0, 0.0, 20.0, 60.0)
    s = np.linspace(0, 60, 601)
    assert np.all(prof.evaluate(s) == 0.0)


def test_unit_shift_boundary_conditions():
    prof = lateral_candidate(0.0, 0.0, 1.0, 20.0, 60.0)
    assert prof.evaluate(0.0) == pytest.approx(0.0, abs=1e-6)
    assert prof.evaluate(20.0) == pytest.approx(1.0, abs=1e-6)
    for s in (0.0, 20.0):
        assert prof.evaluate(s, 1) == pytest.approx(0.0, abs=1e-6)
        assert prof.evaluate(s, 2) == pytest.approx(0.0, abs=1e-6)


def test_derivatives_match_finite_differences():
    prof = lateral_candidate(0.3, -0.05, 1.5, 20.0, 60.0)
    h = 0.01
    s = np.arange(0.02, 59.98, 0.37)
    y = lambda x: prof.evaluate(x)
    assert np.allclose(prof.evaluate(s, 1), (y(s + h) - y(s - h)) / (2 * h), atol=1e-3)
    assert np.allclose(prof.evaluate(s, 2), (y(s + h) - 2 * y(s) + y(s - h)) / h**2, atol=1e-3)


@given(st.floats(-3, 3), st.floats(-0.3, 0.3), st.sampled_from(CFG.shifts), st.floats(2, 40), st.floats(1, 80))
def test_every_candidate_is_c2_and_starts_at_the_ego(y0, dy0, shift, length, horizon):
    prof = lateral_candidate(y0, dy0, shift, length, horizon)
    assert prof.knot_jumps().max(initial=0.0) < 1e-6
    assert prof.evaluate(0.0) == pytest.approx(y0, abs=1e-6)
    assert prof.evaluate(0.0, 1) == pytest.approx(dy0, abs=1e-6)
    assert prof.truncated == (length > horizon)


def test_candidate_set_needs_zero_shift():
    assert [p.shift for p in sample_lateral_candidates((0, 0), CFG.shifts, 20, 60)] == list(CFG.shifts)
    with pytest.raises(ValidationError):
        sample_lateral_candidates((0, 0), (1.0, 2.0), 20, 60)


def test_bad_knots_rejected():
    with pytest.raises(ValidationError):
        LateralProfile(np.array([0.0, 0.0]), np.zeros((1, 4)), 0.0)


# -- path cost ---------------------------------------------------------------------------


def _constant(offset, length):
    return LateralProfile(np.array([0.0, length]), np.array([[offset, 0.0, 0.0, 0.0]]), offset)


def test_cost_examples():
    cfg = replace(CFG, behavior_horizon=10.0)
    assert evaluate_path_cost(_constant(0.0, 10.0), STRAIGHT, 0.0, [], cfg) == 0.0
    assert evaluate_path_cost(_constant(1.0, 10.0), STRAIGHT, 0.0, [], cfg) == pytest.approx(10.0)


def _dense_cost(obj, cfg, y, ds=0.01, dtau=0.01):
    """Dense-quadrature oracle built on shapely polygon distances."""
    s = np.arange(0.0, cfg.behavior_horizon + ds / 2, ds)
    taus = np.arange(0.0, cfg.t_pred + dtau / 2, dtau)
    polys = [Polygon(box_corners(obj.center[0] + obj.velocity[0] * t, obj.center[1] + obj.velocity[1] * t, obj.size[0], obj.size[1], obj.yaw)) for t in taus]
    # one polygon per tau is slow; the static case collapses to one
    if not any(obj.velocity):
        polys = polys[:1]
    phi = np.array([min(p.distance(Point(x, y)) for p in polys) for x in s])
    pen = np.maximum(cfg.d_min - phi, 0.0)
    return cfg.w_c * float(np.sum(0.5 * (pen[1:] + pen[:-1]) * ds))


def test_cost_of_a_straddling_obstacle_matches_dense_quadrature():
    obj = car(25.0, 0.4, yaw=0.3)
    got = evaluate_path_cost(_constant(0.0, 60.0), STRAIGHT, 0.0, [(obj, 1.0)], CFG)
    assert got == pytest.approx(_dense_cost(obj, CFG, 0.0), rel=0.02)


def test_cost_of_a_moving_obstacle_matches_dense_quadrature():
    obj = car(30.0, 8.0, yaw=-math.pi / 2, v=(0.0, -2.0))
    cfg = replace(CFG, behavior_horizon=45.0)
    got = evaluate_path_cost(_constant(0.0, 45.0), STRAIGHT, 0.0, [(obj, 1.0)], cfg)
    s = np.arange(0.0, 45.0 + 0.005, 0.05)
    taus = np.arange(0.0, 4.0 + 0.005, 0.01)
    corners = [box_corners(30.0, 8.0 - 2.0 * t, 4.5, 1.9, -math.pi / 2) for t in taus]
    phi = np.array([min(Polygon(c).distance(Point(x, 0.0)) for c in corners) for x in s])
    pen = np.maximum(CFG.d_min - phi, 0.0)
    oracle = CFG.w_c * float(np.sum(0.5 * (pen[1:] + pen[:-1]) * 0.05))
    assert got == pytest.approx(oracle, rel=0.02)


def test_cost_scales_with_fusion_weight():
    obj = car(25.0, 0.0)
    full = evaluate_path_cost(_constant(0.0, 60.0), STRAIGHT, 0.0, [(obj, 1.0)], CFG)
    half = evaluate_path_cost(_constant(0.0, 60.0), STRAIGHT, 0.0, [(obj, 0.5)], CFG)
    assert half == pytest.approx(0.5 * full)


@settings(max_examples=40, deadline=None)
@given(
    st.sampled_from(CFG.shifts),
    st.lists(st.tuples(st.floats(0, 60), st.floats(-6, 6), st.floats(0, 1)), max_size=3),
    st.tuples(st.floats(0, 60), st.floats(-6, 6), st.floats(-3, 3), st.floats(0.05, 1)),
)
def test_adding_an_object_never_lowers_the_cost(shift, base, extra):
    prof = lateral_candidate(0.0, 0.0, shift, 20.0, 60.0)
    fused = [(car(x, y), w) for x, y, w in base]
    x, y, vx, w = extra
    before = evaluate_path_cost(prof, STRAIGHT, 0.0, fused, CFG)
    after = evaluate_path_cost(prof, STRAIGHT, 0.0, fused + [(car(x, y, v=(vx, 0.0)), w)], CFG)
    assert after >= before


# -- velocity envelope -------------------------------------------------------------------

CENTRE = lateral_candidate(0.0, 0.0, 0.0, 20.0, 60.0)


def test_free_straight_lane_is_map_bound():
    env = compute_velocity_envelope(CENTRE, STRAIGHT, 0.0, [], CFG)
    assert np.all(env.v_max == 13.9)
    assert set(env.term) == {MAP}
    assert env.zero_s is None


def test_conflict_stopping_speed():
    cfg = replace(CFG, front_offset=0.0)
    obj = car(30.0 + 2.25 + 1.35, 0.0)  # corridor first meets the box at the 30 m sample
    env = compute_velocity_envelope(CENTRE, STRAIGHT, 0.0, [obj], cfg)
    assert env.conflicts == (pytest.approx(30.0),)
    assert env.at(24.0) == pytest.approx(6.0)
    assert env.term[int(24.0 / cfg.envelope_ds)] == STOP
    assert env.at(30.0) == 0.0 and env.zero_s == pytest.approx(30.0)


def test_front_offset_moves_the_stop_point_back():
    obj = car(33.6, 0.0)
    env = compute_velocity_envelope(CENTRE, STRAIGHT, 0.0, [obj], CFG)
    assert env.zero_s == pytest.approx(30.0 - CFG.front_offset)


def test_stopline_stopping_speed():
    cfg = replace(CFG, front_offset=0.0)
    env = compute_velocity_envelope(CENTRE, STRAIGHT, 10.0, [], cfg, stoplines=[50.0, 5.0])
    assert env.at(34.0) == pytest.approx(6.0)
    assert env.zero_s == pytest.approx(40.0)


def test_curvature_bound():
    r = 2.0
    t = np.linspace(0, 2 * math.pi, 2000)
    ring = ArcLengthPath.from_polyline(np.column_stack([r * np.cos(t), r * np.sin(t)]), 0.05, np.full(2000, 13.9))
    cfg = replace(CFG, behavior_horizon=5.0, envelope_ds=0.05)
    env = compute_velocity_envelope(lateral_candidate(0, 0, 0, 1.0, 5.0), ring, 1.0, [], cfg)
    assert np.allclose(env.v_max[5:-5], 2.0, rtol=0.02)
    assert env.term[10] == "curvature"


def test_dominance_examples():
    ego_objs = [car(40.0, 12.0)]
    ego = compute_velocity_envelope(CENTRE, STRAIGHT, 0.0, ego_objs, CFG)
    same = compute_velocity_envelope(CENTRE, STRAIGHT, 0.0, ego_objs, CFG)
    assert envelope_coop_dominance(same, ego)
    hidden = car(35.0, 6.0, yaw=-math.pi / 2, v=(0.0, -3.0))
    coop = compute_velocity_envelope(CENTRE, STRAIGHT, 0.0, ego_objs + [hidden], CFG)
    assert envelope_coop_dominance(coop, ego)
    assert np.any(coop.v_max < ego.v_max)
    raised = VelocityEnvelope(coop.s, ego.v_max + np.where(coop.s > 50, 1.0, 0.0), coop.term)
    assert not envelope_coop_dominance(raised, ego)
    with pytest.raises(ValidationError):
        envelope_coop_dominance(VelocityEnvelope(coop.s[:-1], coop.v_max[:-1], coop.term[:-1]), ego)


objects = st.lists(
    st.tuples(st.floats(-10, 80), st.floats(-15, 15), st.floats(-math.pi, math.pi), st.floats(-8, 8), st.floats(-8, 8)),
    max_size=4,
)


@settings(max_examples=60, deadline=None)
@given(objects, objects, st.sampled_from(CFG.shifts), st.lists(st.floats(0, 80), max_size=2))
def test_envelope_invariants_and_dominance(ego_raw, extra_raw, shift, stoplines):
    mk = lambda raw: [car(x, y, yaw, (vx, vy)) for x, y, yaw, vx, vy in raw]
    prof = lateral_candidate(0.0, 0.0, shift, 20.0, 60.0)
    ego = compute_velocity_envelope(prof, STRAIGHT, 5.0, mk(ego_raw), CFG, stoplines)
    coop = compute_velocity_envelope(prof, STRAIGHT, 5.0, mk(ego_raw) + mk(extra_raw), CFG, stoplines)
    assert envelope_coop_dominance(coop, ego)
    for env in (ego, coop):
        assert np.all(env.v_max >= 0.0) and np.all(env.v_max <= 13.9)


# -- lateral QP --------------------------------------------------------------------------


def _cvx_lateral(y_ref, lo, hi, hs, cfg):
    n = len(y_ref)
    Q, c = lateral_objective(y_ref, cfg)
    G = [np.eye(n), -np.eye(n)]
    h = [np.full(n, hi), np.full(n, -lo)]
    for c_ in hs:
        row = np.zeros(n)
        row[c_.index] = -c_.g
        G.append(row[None])
        h.append(np.array([-c_.rhs]))
    A = np.eye(1, n)
    sol = solvers.qp(matrix(2 * Q), matrix(c), matrix(np.vstack(G)), matrix(np.concatenate(h)), matrix(A), matrix(np.array([y_ref[0]])))
    return np.array(sol["x"]).ravel()


def test_lateral_free_optimum_is_the_reference():
    y_ref = lateral_candidate(0, 0, 1.0, 20, 40).evaluate(np.arange(20) * 1.0)
    res = lateral_qp(y_ref, -4.0, 4.0, [], CFG)
    assert np.abs(res.y - y_ref).max() < 1e-6 and not res.degraded


def test_lateral_half_space_matches_reference_solver():
    n = 20
    y_ref = np.zeros(n)
    hs = [HalfSpace(10, 1.0, 0.5)]  # y[10] >= 0.5
    res = lateral_qp(y_ref, -4.0, 4.0, hs, CFG)
    assert res.y[10] == pytest.approx(0.5, abs=1e-9)
    assert np.abs(res.y - _cvx_lateral(y_ref, -4.0, 4.0, hs, CFG)).max() < 1e-5
    assert res.qp.kkt.max < 1e-6


def test_lateral_linearized_obstacle_matches_reference_solver():
    s = np.arange(20) * 1.0
    y_ref = np.zeros(20)
    obj = car(12.0, -1.6)
    hs = linearize_clearance(STRAIGHT, 0.0, s, y_ref, [obj], CFG)
    assert hs
    res = lateral_qp(y_ref, -4.0, 4.0, hs, CFG)
    assert np.abs(res.y - _cvx_lateral(y_ref, -4.0, 4.0, hs, CFG)).max() < 1e-5
    assert res.y[12] > 0.0  # pushed away from the car on the right


def test_pinned_corridor_is_slacked_and_flagged():
    res = lateral_qp(np.zeros(10), 0.0, 0.0, [HalfSpace(5, 1.0, 0.5)], CFG)
    assert np.all(res.y == pytest.approx(0.0, abs=1e-9))
    assert res.degraded


def test_inverted_corridor_rejected():
    with pytest.raises(ValidationError):
        lateral_qp(np.zeros(4), 1.0, -1.0, [], CFG)


# -- plan_step ---------------------------------------------------------------------------


def test_candidate_ties_prefer_small_shift_then_index():
    assert choose_candidate([1.0, 1.0, 1.0], [-1.0, 0.5, -0.5]) == 1
    assert choose_candidate([2.0, 0.0, 0.0], [0.0, 1.0, -1.0]) == 1


def test_empty_road_plan():
    plan = plan_step(EgoState(s=10.0, v=13.9), STRAIGHT, [], CFG)
    tr = plan.trajectory
    assert plan.feasible and not plan.degraded
    assert plan.candidates[plan.chosen].shift == 0.0
    assert np.allclose(tr.v, 13.9, atol=1e-6)
    assert np.allclose(tr.offset, 0.0, atol=1e-9) and np.allclose(tr.y, 0.0, atol=1e-9)
    assert len(tr) == CFG.steps


def test_plan_is_deterministic():
    fused = [(car(45.0, 5.0, yaw=-math.pi / 2, v=(0.0, -3.0)), 1.0), (car(60.0, -1.0), 0.7)]
    ego = EgoState(s=10.0, v=11.0, a=-0.5)
    a = plan_step(ego, STRAIGHT, fused, CFG)
    b = plan_step(ego, STRAIGHT, fused, CFG)
    for f in ("t", "s", "x", "y", "yaw", "v", "a", "j"):
        assert np.array_equal(getattr(a.trajectory, f), getattr(b.trajectory, f))
    assert a.costs == b.costs


def test_obstacle_ahead_brakes_and_stays_under_the_envelope():
    plan = plan_step(EgoState(s=10.0, v=10.0), STRAIGHT, [(car(45.0, 0.0), 1.0)], CFG)
    tr = plan.trajectory
    assert plan.feasible
    assert tr.v[-1] < tr.v[0]
    assert np.all(tr.v <= plan.v_max_time + 1e-6)
    assert np.allclose(tr.v[1:], tr.v[:-1] + tr.a[:-1] * CFG.dt, atol=1e-9)


def test_cooperative_plan_brakes_no_later():
    hidden = car(40.0, 14.0, yaw=-math.pi / 2, v=(0.0, -4.0))
    ego_only = plan_step(EgoState(s=10.0, v=12.0), STRAIGHT, [], CFG)
    coop = plan_step(EgoState(s=10.0, v=12.0), STRAIGHT, [(hidden, 0.645)], CFG)
    assert np.all(coop.envelope.v_max <= ego_only.envelope.v_max)
    assert coop.trajectory.a[1] < ego_only.trajectory.a[1]
