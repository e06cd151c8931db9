"""Lateral offset smoothing QP with linearized clearance constraints."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from coopsim.core import ArcLengthPath, ObjectState, ValidationError
from coopsim.planning.config import PlannerConfig
from coopsim.planning.cost import predict_footprints, quads_signed_distance
from coopsim.planning.qp import QPResult, solve_qp

MIN_GRADIENT = 0.1
FD_STEP = 1e-4


@dataclass(frozen=True, eq=False)
class HalfSpace:
    """``g * y[index] >= rhs``: first-order clearance requirement at one sample."""

    index: int
    g: float
    rhs: float


@dataclass(frozen=True, eq=False)
class LateralResult:
    y: np.ndarray
    degraded: bool
    constraints: tuple[HalfSpace, ...]
    qp: QPResult


def second_difference(n: int) -> np.ndarray:
    D = np.zeros((max(n - 2, 0), n))
    for i in range(n - 2):
        D[i, i : i + 3] = (1.0, -2.0, 1.0)
    return D


def lateral_objective(y_ref: np.ndarray, cfg: PlannerConfig) -> tuple[np.ndarray, np.ndarray]:
    """Q and c of y'Qy + c'y; Q = smoothness + pull + 1e-8 ridge and c = -2 Q y_ref."""
    n = len(y_ref)
    D = second_difference(n)
    Q = cfg.smooth_weight * D.T @ D + (cfg.ref_weight + 1e-8) * np.eye(n)
    return Q, -2.0 * Q @ y_ref


def linearize_clearance(
    route: ArcLengthPath,
    s0: float,
    s: np.ndarray,
    y_ref: np.ndarray,
    objects: Sequence[ObjectState],
    cfg: PlannerConfig,
    s_limit: float | None = None,
) -> list[HalfSpace]:
    """Half-spaces phi0 + g (y - y_ref) >= d_min for samples near an object's predicted footprints.

    ``phi`` is the signed distance to the union of predicted footprints over
    the horizon and ``g`` its derivative along the path normal. Samples past
    ``s_limit`` (where the vehicle will be stopped) and near-zero gradients
    are skipped.
    """
    out: list[HalfSpace] = []
    if not objects:
        return out
    pred = predict_footprints(objects, cfg.t_pred, cfg.dtau)
    quads = pred.reshape(-1, 4, 2)
    n_t = pred.shape[1]
    n = len(s) if s_limit is None else int(np.searchsorted(s, s_limit, side="left"))
    if n == 0:
        return out
    sa = np.repeat(np.minimum(s0 + s[:n], route.length), 3)
    probe = (y_ref[:n, None] + np.array([-FD_STEP, 0.0, FD_STEP])[None, :]).reshape(-1)
    pts = route.position(sa, probe)
    sd = quads_signed_distance(pts, quads).reshape(n, 3, len(objects), n_t).min(axis=3)
    for k in range(n):
        for o in range(len(objects)):
            phi0 = sd[k, 1, o]
            if phi0 >= cfg.d_min + 1.0:
                continue
            g = (sd[k, 2, o] - sd[k, 0, o]) / (2 * FD_STEP)
            if abs(g) < MIN_GRADIENT:
                continue
            out.append(HalfSpace(k, float(g), float(cfg.d_min - phi0 + g * y_ref[k])))
    return out


def lateral_qp(
    y_ref: np.ndarray,
    y_min: np.ndarray | float,
    y_max: np.ndarray | float,
    constraints: Sequence[HalfSpace],
    cfg: PlannerConfig,
    *,
    pin_first: bool = True,
) -> LateralResult:
    """Smooth offsets near ``y_ref`` inside [y_min, y_max] satisfying ``constraints``.

    Box bounds are hard. If the clearance half-spaces cannot all be met, a
    second pass adds one nonnegative slack per half-space with quadratic and
    linear penalty ``slack_penalty`` and flags the result degraded.
    """
    y_ref = np.asarray(y_ref, dtype=float)
    n = len(y_ref)
    lo = np.broadcast_to(np.asarray(y_min, dtype=float), (n,)).copy()
    hi = np.broadcast_to(np.asarray(y_max, dtype=float), (n,)).copy()
    if np.any(lo > hi):
        raise ValidationError("lateral corridor has y_min > y_max")
    Q, c = lateral_objective(y_ref, cfg)
    P, q = 2.0 * Q, c
    A = b = None
    if pin_first:
        A = np.eye(1, n)
        b = np.array([np.clip(y_ref[0], lo[0], hi[0])])
    box_G = np.vstack([np.eye(n), -np.eye(n)])
    box_h = np.concatenate([hi, -lo])
    m = len(constraints)
    hs_G = np.zeros((m, n))
    hs_h = np.zeros(m)
    for i, hsp in enumerate(constraints):
        hs_G[i, hsp.index] = -hsp.g
        hs_h[i] = -hsp.rhs
    res = solve_qp(P, q, A, b, np.vstack([box_G, hs_G]), np.concatenate([box_h, hs_h]))
    if res.ok:
        return LateralResult(res.x, False, tuple(constraints), res)
    # feasibility relaxation: variables (y, sigma), sigma >= 0
    w = cfg.slack_penalty
    P2 = np.block([[P, np.zeros((n, m))], [np.zeros((m, n)), 2.0 * w * np.eye(m)]])
    q2 = np.concatenate([q, np.full(m, w)])
    G2 = np.vstack([
        np.hstack([box_G, np.zeros((2 * n, m))]),
        np.hstack([hs_G, -np.eye(m)]),
        np.hstack([np.zeros((m, n)), -np.eye(m)]),
    ])
    h2 = np.concatenate([box_h, hs_h, np.zeros(m)])
    A2 = None if A is None else np.hstack([A, np.zeros((1, m))])
    res2 = solve_qp(P2, q2, A2, b, G2, h2)
    y = res2.x[:n] if res2.ok else np.clip(y_ref, lo, hi)
    return LateralResult(y, True, tuple(constraints), res2)
