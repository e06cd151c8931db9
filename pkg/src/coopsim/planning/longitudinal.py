"""Jerk-limited speed profile QP over a uniform time grid.

States k = 0..K-1 with v_{k+1} = v_k + a_k dt and a_{k+1} = a_k + j_k dt.
The decision variables are the jerks j_0..j_{K-2}; speeds and
accelerations are affine in them, so the dynamics hold exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from coopsim.core import ValidationError
from coopsim.planning.config import PlannerConfig
from coopsim.planning.qp import QPResult, solve_qp


@dataclass(frozen=True, eq=False)
class SpeedProfile:
    v: np.ndarray
    a: np.ndarray
    j: np.ndarray  # j[k] drives a[k] -> a[k+1]; last entry is 0
    feasible: bool
    objective: float
    qp: QPResult | None = None


def dynamics_maps(K: int, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Mv, Ma with v = v0 + k dt a0 + Mv j and a = a0 + Ma j (rows k = 0..K-1)."""
    k = np.arange(K)[:, None]
    i = np.arange(K - 1)[None, :]
    Mv = dt * dt * np.maximum(k - 1 - i, 0)
    Ma = dt * (i < k).astype(float)
    return Mv, Ma


def distance_map(K: int, dt: float) -> np.ndarray:
    """T with cumulative trapezoidal distance d = T v (rows k = 0..K-1)."""
    T = np.zeros((K, K))
    for k in range(1, K):
        T[k] = T[k - 1]
        T[k, k - 1] += 0.5 * dt
        T[k, k] += 0.5 * dt
    return T


def stop_index(s_grid: np.ndarray, s_zero: float | None) -> int | None:
    """First time index whose cumulative distance reaches ``s_zero``."""
    if s_zero is None:
        return None
    idx = np.nonzero(s_grid >= s_zero - 1e-9)[0]
    return int(idx[0]) if len(idx) else None


def build_speed_qp(
    v_max: np.ndarray, v0: float, a0: float, k_stop: int | None, cfg: PlannerConfig, s_max: float | None = None
):
    """(P, q, A, b, G, h, const) for the jerk-variable problem; objective = x'Px/2 + q'x + const."""
    K = len(v_max)
    dt = cfg.dt
    Mv, Ma = dynamics_maps(K, dt)
    k = np.arange(K)
    v_free = v0 + k * dt * a0
    a_free = np.full(K, a0)
    rows = np.arange(1, K)
    M = Mv[rows]
    r = v_free[rows] - v_max[rows]
    P = 2.0 * (np.eye(K - 1) + cfg.epsilon * M.T @ M)
    q = 2.0 * cfg.epsilon * M.T @ r
    const = float(cfg.epsilon * r @ r)
    eq_rows = [kk for kk in rows if k_stop is not None and kk >= k_stop]
    box_rows = [kk for kk in rows if k_stop is None or kk < k_stop]
    A = Mv[eq_rows] if eq_rows else None
    b = -v_free[eq_rows] if eq_rows else None
    G = [Mv[box_rows], -Mv[box_rows], Ma[rows], -Ma[rows], np.eye(K - 1), -np.eye(K - 1)]
    h = [
        v_max[box_rows] - v_free[box_rows],
        v_free[box_rows] - cfg.v_min,
        cfg.a_max - a_free[rows],
        cfg.a_max + a_free[rows],
        np.full(K - 1, cfg.j_max),
        np.full(K - 1, cfg.j_max),
    ]
    if s_max is not None:
        T = distance_map(K, dt)[-1]
        G.append((T @ Mv)[None, :])
        h.append(np.array([s_max - T @ v_free]))
    return P, q, A, b, np.vstack(G), np.concatenate(h), const


def emergency_profile(v0: float, a0: float, K: int, cfg: PlannerConfig) -> SpeedProfile:
    """Ramp to -a_max at j_max, hold, and stop at zero speed."""
    v = np.zeros(K)
    a = np.zeros(K)
    j = np.zeros(K)
    v[0], a[0] = v0, a0
    for k in range(K - 1):
        if v[k] <= 0.0:
            v[k], a[k], j[k] = 0.0, 0.0, 0.0
            continue
        target = -cfg.a_max
        j[k] = float(np.clip((target - a[k]) / cfg.dt, -cfg.j_max, cfg.j_max))
        a[k + 1] = a[k] + j[k] * cfg.dt
        v[k + 1] = v[k] + a[k] * cfg.dt
        if v[k + 1] <= 0.0:
            # clamp: this step stops the vehicle
            v[k + 1] = 0.0
            a[k + 1] = 0.0
    if v[-1] <= 0.0:
        a[-1] = 0.0
    return SpeedProfile(v, a, j, False, float("nan"))


def longitudinal_qp(
    v_max: np.ndarray,
    v0: float,
    a0: float,
    k_stop: int | None,
    cfg: PlannerConfig,
    s_max: float | None = None,
) -> SpeedProfile:
    """minimize sum j_k^2 + eps * sum (v_k - v_max_k)^2 under the bounds; emergency profile when infeasible.

    ``s_max`` optionally caps the distance travelled over the horizon.
    """
    v_max = np.asarray(v_max, dtype=float)
    K = len(v_max)
    if K < 2:
        raise ValidationError("need at least two time samples")
    if v0 < 0:
        raise ValidationError("initial speed must be non-negative")
    if k_stop is not None and k_stop < 1:
        k_stop = 1
    P, q, A, b, G, h, const = build_speed_qp(v_max, v0, a0, k_stop, cfg, s_max)
    res = solve_qp(P, q, A, b, G, h)
    if not res.ok or res.kkt.max > 1e-6:
        return emergency_profile(v0, a0, K, cfg)
    x = res.x
    Mv, Ma = dynamics_maps(K, cfg.dt)
    v = v0 + np.arange(K) * cfg.dt * a0 + Mv @ x
    a = a0 + Ma @ x
    if k_stop is not None:
        v[k_stop:] = 0.0
    j = np.append(x, 0.0)
    return SpeedProfile(v, a, j, True, res.objective + const, res)
