"""One planning cycle: candidate selection, envelope, lateral and longitudinal QPs."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from coopsim.core import ArcLengthPath, ObjectState, ValidationError
from coopsim.planning.config import PlannerConfig
from coopsim.planning.cost import evaluate_path_cost
from coopsim.planning.envelope import VelocityEnvelope, compute_velocity_envelope
from coopsim.planning.lateral import LateralResult, lateral_qp, linearize_clearance
from coopsim.planning.longitudinal import SpeedProfile, longitudinal_qp, stop_index
from coopsim.planning.splines import LateralProfile, sample_lateral_candidates


@dataclass(frozen=True)
class EgoState:
    """Ego state in route coordinates: arc length, lateral offset and slope, speed, acceleration."""

    s: float
    y: float = 0.0
    dy: float = 0.0
    v: float = 0.0
    a: float = 0.0

    def __post_init__(self) -> None:
        for name in ("s", "y", "dy", "v", "a"):
            if not math.isfinite(getattr(self, name)):
                raise ValidationError(f"ego state {name} must be finite")
        if self.v < 0:
            raise ValidationError("ego speed must be non-negative")


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Time-parameterized plan at uniform ``dt``; ``s`` is route arc length."""

    t: np.ndarray
    s: np.ndarray
    x: np.ndarray
    y: np.ndarray
    yaw: np.ndarray
    offset: np.ndarray
    v: np.ndarray
    a: np.ndarray
    j: np.ndarray
    feasible: bool
    degraded: bool

    def __len__(self) -> int:
        return len(self.t)


@dataclass(frozen=True, eq=False)
class PlanResult:
    trajectory: Trajectory
    candidates: tuple[LateralProfile, ...]
    costs: tuple[float, ...]
    chosen: int
    envelope: VelocityEnvelope
    v_max_time: np.ndarray
    k_stop: int | None
    lateral: LateralResult
    speed: SpeedProfile

    @property
    def feasible(self) -> bool:
        return self.trajectory.feasible

    @property
    def degraded(self) -> bool:
        return self.trajectory.degraded


BRIDGE_PASSES = 4


def choose_candidate(costs: Sequence[float], shifts: Sequence[float]) -> int:
    """Minimum cost; ties go to the smallest |shift|, then the lower index."""
    order = sorted(range(len(costs)), key=lambda i: (costs[i], abs(shifts[i]), i))
    return order[0]


def cumulative_distance(v: np.ndarray, dt: float) -> np.ndarray:
    """Trapezoidal distance covered at each time sample."""
    return np.concatenate([[0.0], np.cumsum(0.5 * (v[1:] + v[:-1]) * dt)])


def envelope_on_time_grid(env: VelocityEnvelope, v_guess: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Envelope at the distances reached by ``v_guess``; returns (v_max_k, s_k)."""
    s_k = cumulative_distance(np.asarray(v_guess, dtype=float), dt)
    return env.at(s_k), s_k


def _speed_guess(ego: EgoState, previous: np.ndarray | None, K: int) -> np.ndarray:
    if previous is None or len(previous) < 2:
        return np.full(K, ego.v)
    shifted = np.asarray(previous[1:], dtype=float)
    guess = np.concatenate([shifted, np.full(max(K - len(shifted), 0), shifted[-1])])[:K]
    guess[0] = ego.v
    return guess


def _follow_envelope(ego: EgoState, env: VelocityEnvelope, cfg: PlannerConfig) -> np.ndarray:
    """Speeds obtained by tracking the envelope with at most a_max of acceleration or braking."""
    v = np.zeros(cfg.steps)
    v[0] = ego.v
    s = 0.0
    step = cfg.a_max * cfg.dt
    for k in range(1, cfg.steps):
        s += v[k - 1] * cfg.dt
        v[k] = max(min(float(env.at(s)), v[k - 1] + step), v[k - 1] - step, 0.0)
    return v


def _speed_plan(ego: EgoState, env: VelocityEnvelope, previous: np.ndarray | None, cfg: PlannerConfig):
    """Longitudinal QP with the arc-length to time bridge.

    The envelope is mapped to time along a speed guess (the previous plan,
    or the current speed on the first cycle) and the QP is re-solved on its
    own profile until the mapping settles. The distance travelled is
    capped at the envelope's zero point. If the guess yields an infeasible
    problem, an envelope-tracking guess is tried before the emergency
    profile.
    """
    zero = env.zero_s
    zero = None if zero is None else max(zero, 0.0)
    first = None
    for guess in (_speed_guess(ego, previous, cfg.steps), _follow_envelope(ego, env, cfg)):
        best = None
        for _ in range(BRIDGE_PASSES):
            v_max_k, s_k = envelope_on_time_grid(env, guess, cfg.dt)
            k_stop = stop_index(s_k, zero)
            speed = longitudinal_qp(v_max_k, ego.v, ego.a, k_stop, cfg, s_max=zero)
            first = first or (speed, v_max_k, k_stop)
            if not speed.feasible:
                break
            best = (speed, v_max_k, k_stop)
            if np.abs(speed.v - guess).max() < 1e-3:
                break
            guess = speed.v
        if best is not None:
            return best
    return first


def plan_step(
    ego: EgoState,
    route: ArcLengthPath,
    fused: Sequence[tuple[ObjectState, float]],
    cfg: PlannerConfig,
    *,
    stoplines: Sequence[float] = (),
    previous_speeds: np.ndarray | None = None,
) -> PlanResult:
    """Deterministic in its inputs; ``previous_speeds`` is the last cycle's planned speed profile."""
    horizon = min(cfg.behavior_horizon, route.length - ego.s)
    if horizon <= 0:
        horizon = 1e-3
    candidates = sample_lateral_candidates((ego.y, ego.dy), cfg.shifts, cfg.transition_length, horizon)
    costs = [evaluate_path_cost(c, route, ego.s, fused, cfg) for c in candidates]
    chosen = choose_candidate(costs, [c.shift for c in candidates])
    profile = candidates[chosen]
    env = compute_velocity_envelope(profile, route, ego.s, fused, cfg, stoplines)

    # lateral refinement on the first part of the chosen path
    s_lat = np.arange(cfg.lateral_samples) * cfg.lateral_ds
    s_lat = s_lat[s_lat <= horizon + 1e-9]
    if len(s_lat) < 2:
        s_lat = np.array([0.0, horizon])
    y_ref = profile.evaluate(s_lat)
    zero = env.zero_s
    s_limit = None if zero is None else max(zero - cfg.front_offset, 0.0)
    halfspaces = linearize_clearance(route, ego.s, s_lat, y_ref, [o for o, _ in fused], cfg, s_limit)
    bound = cfg.corridor_half_width + max(abs(sh) for sh in cfg.shifts)
    lat = lateral_qp(y_ref, -bound, bound, halfspaces, cfg)

    speed, v_max_k, k_stop = _speed_plan(ego, env, previous_speeds, cfg)

    traj = _assemble(ego, route, s_lat, lat.y, profile, speed, cfg, degraded=lat.degraded)
    return PlanResult(traj, tuple(candidates), tuple(costs), chosen, env, v_max_k, k_stop, lat, speed)


def _assemble(
    ego: EgoState,
    route: ArcLengthPath,
    s_lat: np.ndarray,
    y_lat: np.ndarray,
    profile: LateralProfile,
    speed: SpeedProfile,
    cfg: PlannerConfig,
    degraded: bool,
) -> Trajectory:
    K = len(speed.v)
    t = np.arange(K) * cfg.dt
    ds = cumulative_distance(speed.v, cfg.dt)
    s_abs = np.minimum(ego.s + ds, route.length)
    off = np.where(ds <= s_lat[-1], np.interp(ds, s_lat, y_lat), profile.evaluate(ds))
    slope = (np.interp(ds + 0.05, s_lat, y_lat) - np.interp(ds - 0.05, s_lat, y_lat)) / 0.1
    pts = route.position(s_abs, off)
    yaw = route.heading(s_abs) + np.arctan(slope)
    return Trajectory(
        t=t,
        s=s_abs,
        x=pts[:, 0],
        y=pts[:, 1],
        yaw=np.arctan2(np.sin(yaw), np.cos(yaw)),
        offset=off,
        v=speed.v,
        a=speed.a,
        j=speed.j,
        feasible=speed.feasible,
        degraded=degraded or not speed.feasible,
    )
