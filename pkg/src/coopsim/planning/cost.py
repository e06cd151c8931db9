"""Constant-velocity prediction, footprint distances and the candidate path cost."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from coopsim.core import ArcLengthPath, ObjectState, box_corners
from coopsim.planning.config import PlannerConfig
from coopsim.planning.splines import LateralProfile


def predict_footprints(objects: Sequence[ObjectState], t_pred: float, dtau: float) -> np.ndarray:
    """Corners of each object's box at tau = 0, dtau, ..., t_pred; shape (O, T, 4, 2)."""
    taus = np.arange(int(round(t_pred / dtau)) + 1) * dtau
    out = np.zeros((len(objects), len(taus), 4, 2))
    for i, o in enumerate(objects):
        base = box_corners(o.center[0], o.center[1], o.size[0], o.size[1], o.yaw)
        shift = np.outer(taus, o.velocity)
        out[i] = base[None, :, :] + shift[:, None, :]
    return out


def quads_signed_distance(points: np.ndarray, quads: np.ndarray) -> np.ndarray:
    """Signed distance (negative inside) from points (P, 2) to CCW convex quads (Q, 4, 2); shape (P, Q)."""
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    quads = np.asarray(quads, dtype=float).reshape(-1, 4, 2)
    a = quads
    ab = np.roll(quads, -1, axis=1) - a
    rel = points[:, None, None, :] - a[None]
    denom = np.maximum(np.einsum("qkj,qkj->qk", ab, ab), 1e-18)
    t = np.clip(np.einsum("pqkj,qkj->pqk", rel, ab) / denom, 0.0, 1.0)
    diff = rel - t[..., None] * ab[None]
    d = np.sqrt(np.einsum("pqkj,pqkj->pqk", diff, diff)).min(axis=2)
    cross = ab[None, :, :, 0] * rel[..., 1] - ab[None, :, :, 1] * rel[..., 0]
    inside = np.all(cross >= 0.0, axis=2)
    return np.where(inside, -d, d)


def quads_distance(points: np.ndarray, quads: np.ndarray) -> np.ndarray:
    """Unsigned distance (zero inside), shape (P, Q)."""
    return np.maximum(quads_signed_distance(points, quads), 0.0)


def clearance_profile(points: np.ndarray, predicted: np.ndarray, cutoff: float = np.inf) -> np.ndarray:
    """phi[p, o]: smallest distance from point p to object o over the prediction horizon.

    Values at or above ``cutoff`` may be replaced by a lower bound that is
    itself at least ``cutoff``; callers only compare against the cutoff.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    if predicted.shape[0] == 0:
        return np.full((len(points), 0), np.inf)
    o, t = predicted.shape[:2]
    quads = predicted.reshape(o * t, 4, 2)
    centers = quads.mean(axis=1)
    radius = np.linalg.norm(quads - centers[:, None, :], axis=2).max(axis=1)
    lower = np.linalg.norm(points[:, None, :] - centers[None, :, :], axis=2) - radius[None, :]
    near = np.nonzero((lower < cutoff).any(axis=0))[0]
    d = np.maximum(lower, 0.0)
    if len(near):
        d[:, near] = quads_distance(points, quads[near])
    return d.reshape(len(points), o, t).min(axis=2)


def path_samples(route: ArcLengthPath, s0: float, profile: LateralProfile, length: float, ds: float):
    """Arc lengths (relative to ``s0``), offsets and world points of a candidate path."""
    n = max(int(np.floor(length / ds + 1e-9)), 1) + 1
    s = np.arange(n) * ds
    s = s[s0 + s <= route.length + 1e-9]
    if len(s) < 2:
        s = np.array([0.0, max(min(ds, route.length - s0), 1e-3)])
    y = profile.evaluate(s)
    return s, y, route.position(np.minimum(s0 + s, route.length), y)


def _trapezoid(f: np.ndarray, s: np.ndarray) -> float:
    return float(np.sum(0.5 * (f[1:] + f[:-1]) * np.diff(s)))


def evaluate_path_cost(
    candidate: LateralProfile,
    route: ArcLengthPath,
    s0: float,
    fused: Sequence[tuple[ObjectState, float]],
    cfg: PlannerConfig,
    *,
    ds: float | None = None,
    y_ref: float = 0.0,
) -> float:
    """w_d * integral (y - y_ref)^2 ds + w_c * integral sum_o weight_o * max(0, d_min - phi_o(s)) ds."""
    ds = cfg.envelope_ds if ds is None else ds
    s, y, pts = path_samples(route, s0, candidate, cfg.behavior_horizon, ds)
    cost = cfg.w_d * _trapezoid((y - y_ref) ** 2, s)
    if fused:
        objs = [o for o, _ in fused]
        w = np.array([wt for _, wt in fused])
        phi = clearance_profile(pts, predict_footprints(objs, cfg.t_pred, cfg.dtau), cutoff=cfg.d_min)
        pen = np.maximum(cfg.d_min - phi, 0.0) @ w
        cost += cfg.w_c * _trapezoid(pen, s)
    return float(cost)
