"""Velocity envelope: pointwise min of map limit, stopping distance and curvature bound."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from coopsim.core import ArcLengthPath, ObjectState, ValidationError
from coopsim.planning.config import PlannerConfig
from coopsim.planning.cost import clearance_profile, path_samples, predict_footprints
from coopsim.planning.splines import LateralProfile

MAP, STOP, CURVATURE = "map", "stop", "curvature"
KAPPA_FLOOR = 1e-4


@dataclass(frozen=True, eq=False)
class VelocityEnvelope:
    s: np.ndarray  # arc length ahead of the ego
    v_max: np.ndarray
    term: tuple[str, ...]
    conflicts: tuple[float, ...] = ()  # s_conf per conflicting object (relative)

    def at(self, s: np.ndarray | float) -> np.ndarray:
        """Envelope at arbitrary arc lengths; past the end it holds the last value."""
        return np.interp(s, self.s, self.v_max)

    @property
    def zero_s(self) -> float | None:
        """First arc length where the envelope reaches zero."""
        idx = np.nonzero(self.v_max <= 0.0)[0]
        return float(self.s[idx[0]]) if len(idx) else None


def first_conflicts(points: np.ndarray, s: np.ndarray, objects: Sequence[ObjectState], cfg: PlannerConfig) -> list[float]:
    """For each object, the first arc length whose corridor (half-width d_min) meets its predicted footprint."""
    if not objects:
        return []
    phi = clearance_profile(points, predict_footprints(objects, cfg.t_pred, cfg.dtau), cutoff=cfg.d_min)
    out = []
    for o in range(phi.shape[1]):
        hit = np.nonzero(phi[:, o] < cfg.d_min)[0]
        if len(hit):
            out.append(float(s[hit[0]]))
    return out


def compute_velocity_envelope(
    profile: LateralProfile,
    route: ArcLengthPath,
    s0: float,
    fused: Sequence[tuple[ObjectState, float]] | Sequence[ObjectState],
    cfg: PlannerConfig,
    stoplines: Sequence[float] = (),
) -> VelocityEnvelope:
    """Sampled v_max(s) along the chosen path.

    ``stoplines`` are route arc lengths. Stopping distances are measured to
    the ego's front, i.e. reduced by ``cfg.front_offset``.
    """
    s, y, pts = path_samples(route, s0, profile, cfg.behavior_horizon, cfg.envelope_ds)
    v_map = np.asarray(route.limit_at(np.minimum(s0 + s, route.length)), dtype=float)
    if not np.all(np.isfinite(v_map)) or np.any(v_map < 0):
        raise ValidationError("route speed limit must be finite and non-negative")
    objects = [f[0] if isinstance(f, tuple) else f for f in fused]
    conflicts = first_conflicts(pts, s, objects, cfg)
    targets = [line - s0 for line in stoplines if line - s0 >= 0.0] + conflicts
    if targets:
        ds_stop = np.min([np.maximum(t - cfg.front_offset - s, 0.0) for t in targets], axis=0)
        v_stop = np.sqrt(2.0 * cfg.a_max * ds_stop)
    else:
        v_stop = np.full_like(s, np.inf)
    kappa = np.asarray(route.curvature_at(np.minimum(s0 + s, route.length)), dtype=float)
    kappa = np.abs(kappa / np.maximum(1.0 - kappa * y, 0.1))
    v_kappa = np.sqrt(cfg.a_lat_max / np.maximum(kappa, KAPPA_FLOOR))
    stack = np.vstack([v_map, v_stop, v_kappa])
    which = np.argmin(stack, axis=0)
    v = stack[which, np.arange(len(s))]
    names = (MAP, STOP, CURVATURE)
    return VelocityEnvelope(s, v, tuple(names[i] for i in which), tuple(conflicts))


def envelope_coop_dominance(env_coop: VelocityEnvelope, env_ego: VelocityEnvelope) -> bool:
    """True iff the cooperative envelope never exceeds the ego-only one."""
    if env_coop.s.shape != env_ego.s.shape or not np.array_equal(env_coop.s, env_ego.s):
        raise ValidationError("envelopes are sampled on different arc-length grids")
    return bool(np.all(env_coop.v_max <= env_ego.v_max))
